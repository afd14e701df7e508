//! Dense 64-bit real arrays of rank 0, 1 or 2.
//!
//! This is the value type flowing through the expression graph. Matrices are
//! row-major. All reductions run in ascending index order so repeated
//! evaluations are bit-identical.

use std::fmt;

/// Shape of a [`Tensor`]: scalar, vector or row-major matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// (rows, cols), row-major storage.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, Shape::Scalar)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "()"),
            Shape::Vector(n) => write!(f, "({n})"),
            Shape::Matrix(r, c) => write!(f, "({r}x{c})"),
        }
    }
}

/// Dense array of f64 with a [`Shape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor { shape: Shape::Scalar, data: vec![0.0] }
    }
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: Shape::Matrix(rows, cols), data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor { shape, data: vec![1.0; shape.len()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn as_scalar(&self) -> f64 {
        debug_assert!(self.shape.is_scalar(), "as_scalar on {}", self.shape);
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let mut acc = 0.0;
        for i in 0..self.data.len() {
            acc += self.data[i] * other.data[i];
        }
        acc
    }
}

/// y += a * x, elementwise over the flat data.
pub fn axpy(y: &mut Tensor, a: f64, x: &Tensor) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.data.len() {
        y.data[i] += a * x.data[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_lengths() {
        assert_eq!(Shape::Scalar.len(), 1);
        assert_eq!(Shape::Vector(5).len(), 5);
        assert_eq!(Shape::Matrix(3, 4).len(), 12);
    }

    #[test]
    fn dot_and_norm() {
        let a = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.norm(), 5.0);
        let b = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(a.dot(&b), 11.0);
    }
}
