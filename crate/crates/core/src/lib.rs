//! Desk-scale neural signed-distance-field reconstruction with contrastive
//! shaping of normal parameter-gradients, plus the evaluation and
//! verification machinery around it.
//!
//! The crate is organized around a nested-differentiation expression engine
//! ([`autodiff`]); the scene representation ([`field`]), renderer ([`render`])
//! and training loop ([`train`]) build their losses as graphs on top of it.
//! [`mishape`] holds the mutual-information machinery (cosine proxy, InfoNCE
//! shaping losses, exact/approximate projection-residual formulas, Monte
//! Carlo entropy estimators). [`pairing`] selects correlated pixel pairs from
//! feature maps, [`geomeval`] extracts and scores meshes, and [`scenegen`]
//! produces fully synthetic datasets so every claim is checkable offline.

pub mod autodiff;
pub mod field;
pub mod io;
pub mod mishape;
pub mod render;
pub mod tensor;

pub use tensor::{Shape, Tensor};
