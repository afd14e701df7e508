use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn e(dim: usize, axis: usize) -> Vec<f64> {
    axis_dir(dim, axis)
}

// ---- cosine proxy ----

#[test]
fn proxy_identity_orthogonal_scale() {
    let a = vec![0.3, -0.4, 1.2];
    assert_relative_eq!(mi_proxy(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    assert_relative_eq!(mi_proxy(&e(3, 0), &e(3, 1)).unwrap(), 0.0, epsilon = 1e-12);
    let neg: Vec<f64> = a.iter().map(|v| -3.0 * v).collect();
    assert_relative_eq!(mi_proxy(&a, &neg).unwrap(), 1.0, epsilon = 1e-12);
}

#[test]
fn proxy_degenerate_sides() {
    let z = vec![0.0; 3];
    let a = vec![1.0, 0.0, 0.0];
    assert!(matches!(mi_proxy(&z, &a), Err(MiError::DegenerateVector { side: "left" })));
    assert!(matches!(mi_proxy(&a, &z), Err(MiError::DegenerateVector { side: "right" })));
}

proptest! {
    #[test]
    fn proxy_symmetric_bounded_scale_invariant(
        a in proptest::collection::vec(-5.0f64..5.0, 4),
        b in proptest::collection::vec(-5.0f64..5.0, 4),
        s in 0.01f64..100.0,
        t in 0.01f64..100.0,
        flip in proptest::bool::ANY,
    ) {
        prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
        let ab = mi_proxy(&a, &b).unwrap();
        let ba = mi_proxy(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        let sign = if flip { -1.0 } else { 1.0 };
        let a2: Vec<f64> = a.iter().map(|v| sign * s * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| t * v).collect();
        let scaled = mi_proxy(&a2, &b2).unwrap();
        prop_assert!((ab - scaled).abs() < 1e-9);
    }
}

// ---- InfoNCE ----

/// Independent scalar oracle for the loss formula.
fn infonce_oracle(pos_cos: &[f64], neg_cos: &[f64], tau: f64, include_pos: bool) -> f64 {
    let num: f64 = pos_cos.iter().map(|c| (c.abs() / tau).exp()).sum();
    let mut den: f64 = neg_cos.iter().map(|c| (c.abs() / tau).exp()).sum();
    if include_pos {
        den += num;
    }
    -(num / den).ln()
}

fn batch_from_cosines(pos_cos: &[f64], neg_cos: &[f64]) -> MIBatch {
    // Build vectors in a plane so cos(anchor, v) is exact by construction.
    let dim = 4;
    let anchor = e(dim, 0);
    let mk = |c: f64| -> Vec<f64> {
        let s = (1.0 - c * c).max(0.0).sqrt();
        let mut v = vec![0.0; dim];
        v[0] = c;
        v[1] = s;
        v
    };
    MIBatch::new(
        anchor,
        pos_cos.iter().map(|&c| mk(c)).collect(),
        neg_cos.iter().map(|&c| mk(c)).collect(),
    )
    .unwrap()
}

#[test]
fn infonce_matches_oracle_examples() {
    // 1 positive cos 1, 2 negatives cos 0: -ln(e / (e + 2)).
    let b = batch_from_cosines(&[1.0], &[0.0, 0.0]);
    let expect = infonce_oracle(&[1.0], &[0.0, 0.0], 1.0, true);
    assert_relative_eq!(expect, 0.5514447139320511, epsilon = 1e-12);
    assert_relative_eq!(infonce_loss(&b, 1.0).unwrap(), expect, epsilon = 1e-9);

    // All cosines equal: common factor cancels, -ln(P / (P + N)).
    for c in [0.0, 0.37, 0.9] {
        let b = batch_from_cosines(&[c, c, c], &[c, c, c, c, c]);
        let expect = -(3.0f64 / 8.0).ln();
        assert_relative_eq!(infonce_loss(&b, 1.0).unwrap(), expect, epsilon = 1e-9);
    }

    // 1 positive cos 0, 2 negatives cos 1: -ln(1 / (1 + 2e)) = ln(1 + 2e).
    let b = batch_from_cosines(&[0.0], &[1.0, 1.0]);
    let expect = infonce_oracle(&[0.0], &[1.0, 1.0], 1.0, true);
    assert_relative_eq!(expect, (1.0 + 2.0 * std::f64::consts::E).ln(), epsilon = 1e-12);
    assert_relative_eq!(infonce_loss(&b, 1.0).unwrap(), expect, epsilon = 1e-9);
}

#[test]
fn infonce_negatives_only_mode() {
    let b = batch_from_cosines(&[0.8], &[0.1, 0.3]);
    let with = infonce_loss(&b, 1.0).unwrap();
    let without =
        infonce_loss_with_mode(&b, 1.0, DenominatorMode::NegativesOnly).unwrap();
    assert_relative_eq!(with, infonce_oracle(&[0.8], &[0.1, 0.3], 1.0, true), epsilon = 1e-9);
    assert_relative_eq!(without, infonce_oracle(&[0.8], &[0.1, 0.3], 1.0, false), epsilon = 1e-9);
    assert!(without < with, "dropping positives from the denominator lowers the loss");
}

#[test]
fn infonce_monotone_in_cosines() {
    // Raising a positive cosine lowers the loss; raising a negative raises it.
    let base = infonce_loss(&batch_from_cosines(&[0.5, 0.4], &[0.2, 0.1]), 1.0).unwrap();
    let better_pos = infonce_loss(&batch_from_cosines(&[0.7, 0.4], &[0.2, 0.1]), 1.0).unwrap();
    let worse_neg = infonce_loss(&batch_from_cosines(&[0.5, 0.4], &[0.6, 0.1]), 1.0).unwrap();
    assert!(better_pos < base);
    assert!(worse_neg > base);
}

#[test]
fn infonce_empty_sets_error() {
    assert!(matches!(
        MIBatch::new(vec![1.0, 0.0], vec![], vec![vec![0.0, 1.0]]),
        Err(MiError::EmptySet { which: "positive" })
    ));
    assert!(matches!(
        MIBatch::new(vec![1.0, 0.0], vec![vec![0.0, 1.0]], vec![]),
        Err(MiError::EmptySet { which: "negative" })
    ));
}

#[test]
fn infonce_temperature_default_reproduces_plain_formula() {
    let b = batch_from_cosines(&[0.6], &[0.2, 0.9]);
    let plain = infonce_oracle(&[0.6], &[0.2, 0.9], 1.0, true);
    assert_relative_eq!(infonce_loss(&b, 1.0).unwrap(), plain, epsilon = 1e-9);
    let sharp = infonce_loss(&b, 0.25).unwrap();
    assert_relative_eq!(sharp, infonce_oracle(&[0.6], &[0.2, 0.9], 0.25, true), epsilon = 1e-9);
}

#[test]
fn infonce_slot_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(77);
    let dim = 6;
    let g = InfoNceGraph::build(dim, 2, 3, 1.0, DenominatorMode::PositivesAndNegatives);
    let rand_vec = |rng: &mut StdRng| -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let batch = MIBatch::new(
        rand_vec(&mut rng),
        vec![rand_vec(&mut rng), rand_vec(&mut rng)],
        vec![rand_vec(&mut rng), rand_vec(&mut rng), rand_vec(&mut rng)],
    )
    .unwrap();
    let (_, grads) = g.eval_with_grads(&batch).unwrap();
    let h = 1e-6;
    let eval_perturbed = |which: usize, comp: usize, delta: f64| -> f64 {
        let mut b = batch.clone();
        match which {
            0 => b.anchor[comp] += delta,
            1 | 2 => b.positives[which - 1][comp] += delta,
            _ => b.negatives[which - 3][comp] += delta,
        }
        g.eval(&b).unwrap()
    };
    for which in 0..6 {
        for comp in 0..dim {
            let fd = (eval_perturbed(which, comp, h) - eval_perturbed(which, comp, -h)) / (2.0 * h);
            let an = grads[which][comp];
            let denom = an.abs().max(fd.abs()).max(0.01);
            assert!(
                (an - fd).abs() / denom < 1e-6,
                "slot {which} comp {comp}: {an} vs {fd}"
            );
        }
    }
}

// ---- first-order ablation ----

#[test]
fn fo_loss_examples() {
    let n = vec![0.0, 0.0, 1.0];
    // One parallel positive: -ln(e) = -1.
    assert_relative_eq!(fo_loss(&n, &[n.clone()], 1.0).unwrap(), -1.0, epsilon = 1e-12);
    // One orthogonal positive: -ln(1) = 0.
    assert_relative_eq!(fo_loss(&n, &[vec![1.0, 0.0, 0.0]], 1.0).unwrap(), 0.0, epsilon = 1e-12);
    // Two parallel positives: -ln(2e).
    let expect = -(2.0 * std::f64::consts::E).ln();
    assert_relative_eq!(fo_loss(&n, &[n.clone(), n.clone()], 1.0).unwrap(), expect, epsilon = 1e-12);
    assert_relative_eq!(expect, -1.6931471805599454, epsilon = 1e-12);
    // Zero-length normal errors.
    assert!(fo_loss(&[0.0; 3], &[n], 1.0).is_err());
}

// ---- projection residuals ----

#[test]
fn projection_examples() {
    let r = projection_residual(&[0.0, 1.0], &[vec![1.0, 0.0]]).unwrap();
    assert_eq!(r, vec![0.0, 1.0]);
    let r = projection_residual(&[1.0, 0.0], &[vec![1.0, 0.0]]).unwrap();
    assert!(norm(&r) < 1e-12);
    let r = projection_residual(&[1.0, 1.0, 0.0], &[vec![1.0, 0.0, 0.0]]).unwrap();
    assert_relative_eq!(r[0], 0.0, epsilon = 1e-12);
    assert_relative_eq!(r[1], 1.0, epsilon = 1e-12);
}

#[test]
fn projection_rank_deficient_basis_rejected() {
    let basis = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
    assert!(matches!(
        projection_residual(&[0.0, 1.0, 0.0], &basis),
        Err(MiError::RankDeficient { index: 1, .. })
    ));
}

proptest! {
    #[test]
    fn projection_idempotent_and_orthogonal(
        seed in 0u64..1000,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let dim = 6;
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r1 = projection_residual(&v, &basis).unwrap();
        for b in &basis {
            let d: f64 = r1.iter().zip(b).map(|(a, c)| a * c).sum();
            prop_assert!(d.abs() < 1e-9, "residual not orthogonal: {d}");
        }
        let r2 = projection_residual(&r1, &basis).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

// ---- exact and approximate MI ----

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn random_triple(rng: &mut StdRng, dim: usize) -> JacobianTriple {
    let mut mk = || -> (f64, Vec<f64>) {
        let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        (rng.random_range(0.1..5.0), unit(d))
    };
    JacobianTriple::new([mk(), mk(), mk()], rng.random_range(0.001..0.1))
}

/// Classical Gram-Schmidt oracle: single-pass unnormalized projections.
fn gs_residual_norm(v: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut r = b.clone();
        for qi in &q {
            let d: f64 = b.iter().zip(qi).map(|(x, y)| x * y).sum();
            let qq: f64 = qi.iter().map(|x| x * x).sum();
            for (ri, &qv) in r.iter_mut().zip(qi) {
                *ri -= d / qq * qv;
            }
        }
        if norm(&r) > 1e-12 {
            q.push(r);
        }
    }
    let mut r = v.to_vec();
    for qi in &q {
        let d: f64 = v.iter().zip(qi).map(|(x, y)| x * y).sum();
        let qq: f64 = qi.iter().map(|x| x * x).sum();
        for (ri, &qv) in r.iter_mut().zip(qi) {
            *ri -= d / qq * qv;
        }
    }
    norm(&r)
}

fn mi_exact_oracle(a: &JacobianTriple, b: &JacobianTriple) -> f64 {
    let [ax, ay, az] = a.dirs();
    let bs: Vec<Vec<f64>> = b.dirs().iter().map(|d| d.to_vec()).collect();
    let mut with_a = |extra: &[&[f64]]| -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = extra.iter().map(|e| e.to_vec()).collect();
        out.extend(bs.iter().cloned());
        out
    };
    let num = gs_residual_norm(ay, &[ax.to_vec()]) * gs_residual_norm(az, &[ax.to_vec(), ay.to_vec()]);
    let den = gs_residual_norm(ax, &with_a(&[]))
        * gs_residual_norm(ay, &with_a(&[ax]))
        * gs_residual_norm(az, &with_a(&[ax, ay]));
    (num / den).ln()
}

#[test]
fn mi_exact_zero_for_orthogonal_configuration() {
    // A axes mutually orthogonal; B spans a subspace orthogonal to all of A.
    let dim = 8;
    let a = JacobianTriple::new(
        [(1.0, e(dim, 0)), (2.0, e(dim, 1)), (0.5, e(dim, 2))],
        0.01,
    );
    let b = JacobianTriple::new(
        [(1.0, e(dim, 3)), (1.0, e(dim, 4)), (1.0, e(dim, 5))],
        0.01,
    );
    match mi_exact(&a, &b).unwrap() {
        MiValue::Finite(v) => assert_relative_eq!(v, 0.0, epsilon = 1e-12),
        MiValue::Saturated => panic!("unexpected saturation"),
    }
    match mi_approx(&a, &b).unwrap() {
        MiValue::Finite(v) => assert_relative_eq!(v, 0.0, epsilon = 1e-12),
        MiValue::Saturated => panic!("unexpected saturation"),
    }
}

#[test]
fn mi_exact_saturates_when_span_captures_axis() {
    let dim = 8;
    // B's span contains A_x.
    let a = JacobianTriple::new(
        [(1.0, e(dim, 0)), (1.0, e(dim, 1)), (1.0, e(dim, 2))],
        0.01,
    );
    let b = JacobianTriple::new(
        [(1.0, e(dim, 0)), (1.0, e(dim, 4)), (1.0, e(dim, 5))],
        0.01,
    );
    assert!(mi_exact(&a, &b).unwrap().is_saturated());
    assert!(mi_approx(&a, &b).unwrap().is_saturated());
    assert_eq!(mi_exact(&a, &b).unwrap().clamped(), MI_SATURATION_CLAMP);
}

#[test]
fn mi_approx_angle_example() {
    // A_x . B_x = cos(30 deg), everything else orthogonal: -ln(sin 30) = ln 2.
    let dim = 8;
    let th: f64 = std::f64::consts::PI / 6.0;
    let mut bx = vec![0.0; dim];
    bx[0] = th.cos();
    bx[6] = th.sin();
    let a = JacobianTriple::new(
        [(1.0, e(dim, 0)), (1.0, e(dim, 1)), (1.0, e(dim, 2))],
        0.01,
    );
    let b = JacobianTriple::new([(1.0, bx), (1.0, e(dim, 4)), (1.0, e(dim, 5))], 0.01);
    match mi_approx(&a, &b).unwrap() {
        MiValue::Finite(v) => assert_relative_eq!(v, (2.0f64).ln(), epsilon = 1e-12),
        MiValue::Saturated => panic!("unexpected saturation"),
    }
}

#[test]
fn mi_exact_matches_gram_schmidt_oracle() {
    let mut rng = StdRng::seed_from_u64(4242);
    for _ in 0..200 {
        let a = random_triple(&mut rng, 8);
        let b = random_triple(&mut rng, 8);
        let got = match mi_exact(&a, &b).unwrap() {
            MiValue::Finite(v) => v,
            MiValue::Saturated => continue,
        };
        let want = mi_exact_oracle(&a, &b);
        let denom = got.abs().max(want.abs()).max(1.0);
        assert!((got - want).abs() / denom < 1e-9, "{got} vs oracle {want}");
    }
}

#[test]
fn mi_values_invariant_under_length_rescaling() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..50 {
        let a = random_triple(&mut rng, 8);
        let b = random_triple(&mut rng, 8);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for ax in a2.axes.iter_mut() {
            ax.0 *= rng.random_range(0.01..100.0);
        }
        for bx in b2.axes.iter_mut() {
            bx.0 *= rng.random_range(0.01..100.0);
        }
        a2.step *= rng.random_range(0.1..10.0);
        let (v1, v2) = (mi_exact(&a, &b).unwrap(), mi_exact(&a2, &b2).unwrap());
        match (v1, v2) {
            (MiValue::Finite(x), MiValue::Finite(y)) => assert!((x - y).abs() < 1e-12),
            (a, b) => assert_eq!(a.is_saturated(), b.is_saturated()),
        }
        let (w1, w2) = (mi_approx(&a, &b).unwrap(), mi_approx(&a2, &b2).unwrap());
        match (w1, w2) {
            (MiValue::Finite(x), MiValue::Finite(y)) => assert!((x - y).abs() < 1e-12),
            (a, b) => assert_eq!(a.is_saturated(), b.is_saturated()),
        }
    }
}

#[test]
fn mi_exact_equals_approx_on_orthogonal_instances() {
    // A axes mutually orthogonal and each B axis orthogonal to the two
    // non-corresponding A axes: the chain terms collapse to the per-axis
    // ones.
    let mut rng = StdRng::seed_from_u64(99);
    let dim = 9;
    for _ in 0..100 {
        let theta: [f64; 3] = [
            rng.random_range(0.2..1.4),
            rng.random_range(0.2..1.4),
            rng.random_range(0.2..1.4),
        ];
        let mut mk = |k: usize| -> Vec<f64> {
            // B_k lives in span(e_k, e_{k+3}): orthogonal to A_j (j != k).
            let mut v = vec![0.0; dim];
            v[k] = theta[k].cos();
            v[k + 3] = theta[k].sin();
            v
        };
        let a = JacobianTriple::new(
            [(1.0, e(dim, 0)), (1.0, e(dim, 1)), (1.0, e(dim, 2))],
            0.01,
        );
        let b = JacobianTriple::new([(1.0, mk(0)), (1.0, mk(1)), (1.0, mk(2))], 0.01);
        let (x, y) = (mi_exact(&a, &b).unwrap(), mi_approx(&a, &b).unwrap());
        match (x, y) {
            (MiValue::Finite(xe), MiValue::Finite(ya)) => {
                assert!((xe - ya).abs() < 1e-9, "exact {xe} vs approx {ya}");
            }
            _ => panic!("unexpected saturation"),
        }
    }
}

// ---- entropy estimation ----

#[test]
fn entropy_d3_marginal_is_ln2() {
    // Archimedes: a coordinate of a uniform point on S^2 is uniform on
    // [-1, 1], whose differential entropy is ln 2.
    let est = entropy_mc(3, &[e(3, 0)], &[1.0], 40_000, 7, EstimatorKind::Knn).unwrap();
    assert!(
        (est.value - (2.0f64).ln()).abs() < 0.02,
        "estimate {} vs ln2, se {}",
        est.value,
        est.std_err
    );
    let hist = entropy_mc(3, &[e(3, 0)], &[1.0], 40_000, 7, EstimatorKind::Histogram).unwrap();
    assert!((hist.value - (2.0f64).ln()).abs() < 0.03, "histogram {}", hist.value);
}

#[test]
fn entropy_scaling_law() {
    for d in [3usize, 8] {
        let base = entropy_mc(d, &[e(d, 0)], &[1.0], 40_000, 11, EstimatorKind::Knn).unwrap();
        let scaled = entropy_mc(d, &[e(d, 0)], &[2.0], 40_000, 12, EstimatorKind::Knn).unwrap();
        let diff = scaled.value - base.value;
        assert!(
            (diff - (2.0f64).ln()).abs() < 0.02,
            "D={d}: diff {diff} vs ln2"
        );
    }
}

#[test]
fn entropy_joint_sin_law() {
    let d = 8;
    let pair = |phi: f64| {
        let mut u = vec![0.0; d];
        u[0] = phi.cos();
        u[1] = phi.sin();
        vec![e(d, 0), u]
    };
    let h90 = entropy_mc(d, &pair(std::f64::consts::FRAC_PI_2), &[1.0, 1.0], 60_000, 3, EstimatorKind::Knn).unwrap();
    let h30 = entropy_mc(d, &pair(std::f64::consts::FRAC_PI_6), &[1.0, 1.0], 60_000, 4, EstimatorKind::Knn).unwrap();
    let diff = h90.value - h30.value;
    assert!(
        (diff - (2.0f64).ln()).abs() < 0.05,
        "joint difference {diff} vs ln2 (se {} {})",
        h90.std_err,
        h30.std_err
    );
}

#[test]
fn entropy_rejects_bad_inputs() {
    assert!(matches!(
        entropy_mc(3, &[e(3, 0)], &[1.0], 100, 0, EstimatorKind::Knn),
        Err(MiError::TooFewSamples { .. })
    ));
    assert!(matches!(
        entropy_mc(2, &[e(2, 0)], &[1.0], 20_000, 0, EstimatorKind::Knn),
        Err(MiError::BadDimension(2))
    ));
    let bad = vec![vec![0.5, 0.5, 0.5]];
    assert!(matches!(
        entropy_mc(3, &bad, &[1.0], 20_000, 0, EstimatorKind::Knn),
        Err(MiError::NonUnitDirection(0))
    ));
}

#[test]
fn entropy_deterministic_per_seed() {
    let a = entropy_mc(3, &[e(3, 0)], &[1.0], 20_000, 5, EstimatorKind::Knn).unwrap();
    let b = entropy_mc(3, &[e(3, 0)], &[1.0], 20_000, 5, EstimatorKind::Knn).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
}

#[test]
fn verify_report_runs_and_formats() {
    let report = verify_entropy_laws(&[3], 20_000, 99).unwrap();
    assert!(report.checks.len() >= 4);
    let text = report.to_text();
    assert!(text.contains("scaling-law D=3 c=2"));
    assert!(text.contains("marginal D=3"));
    let again = verify_entropy_laws(&[3], 20_000, 99).unwrap();
    assert_eq!(text, again.to_text(), "report must be byte-identical per seed");
}
