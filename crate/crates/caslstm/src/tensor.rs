//! Dense rank-1/2 tensors, activations with paired derivatives, and seeded
//! initialization. The universal numeric carrier for every other module.
//!
//! Tensors are immutable values in spirit: operations return new tensors,
//! and in-place mutation is confined to gradient accumulation helpers.
//! Storage is row-major; precision (f32 for training, f64 for gradient
//! checking) is chosen by instantiating `Tensor<f32>` or `Tensor<f64>`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar types tensors can hold. Implemented by `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
}

/// Converts an `f64` constant into the working scalar type.
pub(crate) fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in scalar type")
}

/// Shape of a tensor: a rank-1 vector or a rank-2 row-major matrix.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Total number of elements.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "({n},)"),
            Shape::Matrix(r, c) => write!(f, "({r}, {c})"),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense real array of rank 1 or 2.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "matrix",
                lhs: Shape::Matrix(rows, cols),
                rhs: Shape::Vector(data.len()),
            });
        }
        Ok(Tensor {
            shape: Shape::Matrix(rows, cols),
            data,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn zeros_vector(n: usize) -> Self {
        Self::zeros(Shape::Vector(n))
    }

    pub fn zeros_matrix(rows: usize, cols: usize) -> Self {
        Self::zeros(Shape::Matrix(rows, cols))
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Length of a rank-1 tensor.
    pub fn vec_len(&self) -> usize {
        debug_assert!(matches!(self.shape, Shape::Vector(_)));
        self.data.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        match self.shape {
            Shape::Matrix(r, _) => r,
            Shape::Vector(_) => panic!("rows() on a vector"),
        }
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.shape {
            Shape::Matrix(_, c) => c,
            Shape::Vector(_) => panic!("cols() on a vector"),
        }
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Row `r` of a rank-2 tensor as an owned vector tensor.
    pub fn row_vector(&self, r: usize) -> Tensor<T> {
        Tensor::vector(self.row(r).to_vec())
    }

    /// Builds a `T x d` matrix from equal-length vector rows.
    pub fn from_rows(rows: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = rows.first().ok_or(Error::Empty("row set"))?;
        let d = first.vec_len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: first.shape(),
                    rhs: row.shape(),
                });
            }
            data.extend_from_slice(row.data());
        }
        Tensor::matrix(rows.len(), d, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination. Shapes must already agree; operation
    /// boundaries validate shapes before reaching here.
    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.zip(other, |a, b| a - b)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, k: T) {
        for a in self.data.iter_mut() {
            *a = *a * k;
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} {:?}", self.shape, self.data)
    }
}

/// Matrix-vector product `y = W x`.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = match w.shape() {
        Shape::Matrix(r, c) => (r, c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: other,
                rhs: x.shape(),
            })
        }
    };
    match x.shape() {
        Shape::Vector(n) if n == cols => {}
        other => {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: w.shape(),
                rhs: other,
            })
        }
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = w.row(r);
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(xd.iter()) {
            acc = acc + *a * *b;
        }
        out.push(acc);
    }
    Ok(Tensor::vector(out))
}

/// Transposed matrix-vector product `x = W^T y`.
pub fn matvec_t<T: Scalar>(w: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = match w.shape() {
        Shape::Matrix(r, c) => (r, c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                lhs: other,
                rhs: y.shape(),
            })
        }
    };
    match y.shape() {
        Shape::Vector(n) if n == rows => {}
        other => {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                lhs: w.shape(),
                rhs: other,
            })
        }
    }
    let yd = y.data();
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let row = w.row(r);
        let yr = yd[r];
        for (o, a) in out.iter_mut().zip(row.iter()) {
            *o = *o + *a * yr;
        }
    }
    Ok(Tensor::vector(out))
}

/// Rank-1 update `acc += a b^T`, used for weight gradients.
pub fn add_outer<T: Scalar>(acc: &mut Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) {
    let (rows, cols) = match acc.shape() {
        Shape::Matrix(r, c) => (r, c),
        _ => panic!("add_outer accumulator must be a matrix"),
    };
    assert_eq!(a.vec_len(), rows, "add_outer row mismatch");
    assert_eq!(b.vec_len(), cols, "add_outer col mismatch");
    let bd = b.data();
    for r in 0..rows {
        let ar = a.data()[r];
        let row = acc.row_mut(r);
        for (o, &bv) in row.iter_mut().zip(bd.iter()) {
            *o = *o + ar * bv;
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise logistic sigmoid; outputs strictly in (0, 1).
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Derivative of the sigmoid as a function of its input.
pub fn sigmoid_prime<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let s = sigmoid_scalar(v);
        s * (T::one() - s)
    })
}

/// Elementwise hyperbolic tangent; outputs in (-1, 1).
pub fn tanh_act<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Derivative of tanh as a function of its input.
pub fn tanh_prime<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let t = v.tanh();
        T::one() - t * t
    })
}

/// Elementwise rectifier.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Shift-invariant softmax over a rank-1 tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = x
        .data()
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    Ok(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
}

/// Tensor with i.i.d. entries uniform in `[-bound, bound]`.
pub fn uniform_init<T: Scalar>(rng: &mut Rng, shape: Shape, bound: f64) -> Result<Tensor<T>> {
    if !(bound > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "init bound must be positive, got {bound}"
        )));
    }
    let data = (0..shape.len())
        .map(|_| real::<T>(rng.uniform(-bound, bound)))
        .collect();
    Ok(Tensor { shape, data })
}

/// Xavier/Glorot uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Inverted-dropout mask: entries are 0 with probability `rate` and
/// `1 / (1 - rate)` otherwise, so the masked signal keeps its expectation.
pub(crate) fn dropout_mask<T: Scalar>(shape: Shape, rate: f64, rng: &mut Rng) -> Tensor<T> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = real::<T>(1.0 / (1.0 - rate));
    let data = (0..shape.len())
        .map(|_| if rng.unit() < rate { T::zero() } else { keep })
        .collect();
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn matvec_identity() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = matvec(&w, &vecf(&[3.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn matvec_zero_matrix() {
        let w = Tensor::zeros_matrix(2, 2);
        let y = matvec(&w, &vecf(&[5.0, 7.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_direct_arithmetic() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = matvec(&w, &vecf(&[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let w = Tensor::zeros_matrix(2, 3);
        let err = matvec(&w, &vecf(&[1.0, 2.0])).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matvec",
                lhs: Shape::Matrix(2, 3),
                rhs: Shape::Vector(2),
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("(2, 3)") && msg.contains("(2,)"), "{msg}");
    }

    #[test]
    fn matvec_distributes_over_addition() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let w = uniform_init::<f64>(&mut rng, Shape::Matrix(4, 3), 2.0).unwrap();
            let x = uniform_init::<f64>(&mut rng, Shape::Vector(3), 2.0).unwrap();
            let y = uniform_init::<f64>(&mut rng, Shape::Vector(3), 2.0).unwrap();
            let lhs = matvec(&w, &x.add(&y)).unwrap();
            let rhs = matvec(&w, &x).unwrap().add(&matvec(&w, &y).unwrap());
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matvec_t_is_transpose() {
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = matvec_t(&w, &vecf(&[1.0, 10.0])).unwrap();
        assert_eq!(y.data(), &[41.0, 52.0, 63.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut acc = Tensor::zeros_matrix(2, 3);
        add_outer(&mut acc, &vecf(&[1.0, 2.0]), &vecf(&[3.0, 4.0, 5.0]));
        assert_eq!(acc.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn sigmoid_closed_forms() {
        let ln3 = 3.0f64.ln();
        let y = sigmoid(&vecf(&[0.0, ln3, -ln3]));
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
        assert!((y.data()[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let y = sigmoid(&vecf(&[800.0, -800.0]));
        assert!(y.all_finite());
        assert!(y.data()[0] > 0.0 && y.data()[0] <= 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1.0);
    }

    #[test]
    fn tanh_odd_and_saturating() {
        let y = tanh_act(&vecf(&[0.0, 1.3, -1.3, 20.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] + y.data()[2]).abs() < 1e-15);
        assert!((y.data()[3] - 1.0).abs() < 1e-12);
    }

    // Central finite differences are the independent oracle for the paired
    // derivative functions.
    #[test]
    fn activation_derivatives_match_finite_differences() {
        let mut rng = Rng::new(3);
        let eps = 1e-6;
        for _ in 0..100 {
            let x = rng.uniform(-4.0, 4.0);
            let xt = vecf(&[x]);
            let cases: [(f64, f64, f64); 2] = [
                (
                    sigmoid_prime(&xt).data()[0],
                    sigmoid(&vecf(&[x + eps])).data()[0],
                    sigmoid(&vecf(&[x - eps])).data()[0],
                ),
                (
                    tanh_prime(&xt).data()[0],
                    tanh_act(&vecf(&[x + eps])).data()[0],
                    tanh_act(&vecf(&[x - eps])).data()[0],
                ),
            ];
            for (analytic, plus, minus) in cases {
                let numeric = (plus - minus) / (2.0 * eps);
                // Denominator floored at the activations' unit scale: near
                // saturation the derivative underflows the oracle's own
                // f64 roundoff floor (~|f|*1e-10 at this step size), so a
                // bare relative comparison would measure the oracle, not
                // the derivative.
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-8, "x={x} analytic={analytic} numeric={numeric}");
            }
        }
    }

    #[test]
    fn softmax_uniform_singleton_and_shift() {
        let u = softmax(&vecf(&[2.5, 2.5, 2.5])).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&vecf(&[42.0])).unwrap();
        assert_eq!(s.data(), &[1.0]);
        let a = softmax(&vecf(&[1.0, -2.0, 0.5])).unwrap();
        let b = softmax(&vecf(&[1.0 + 17.0, -2.0 + 17.0, 0.5 + 17.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_for_large_inputs() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let x = uniform_init::<f64>(&mut rng, Shape::Vector(7), 50.0).unwrap();
            let p = softmax(&x).unwrap();
            assert!((p.sum() - 1.0).abs() < 1e-12);
            assert!(p.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert_eq!(
            softmax(&Tensor::<f64>::vector(vec![])).unwrap_err(),
            Error::Empty("softmax input")
        );
    }

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        let mut rng = Rng::new(1);
        let t = uniform_init::<f64>(&mut rng, Shape::Matrix(2, 2), 0.1).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 0.1));

        let again = uniform_init::<f64>(&mut Rng::new(1), Shape::Matrix(2, 2), 0.1).unwrap();
        assert_eq!(t, again);

        let other = uniform_init::<f64>(&mut Rng::new(2), Shape::Matrix(2, 2), 0.1).unwrap();
        assert_ne!(t, other);
    }

    #[test]
    fn uniform_init_rejects_nonpositive_bound() {
        let mut rng = Rng::new(1);
        assert!(uniform_init::<f64>(&mut rng, Shape::Vector(3), 0.0).is_err());
        assert!(uniform_init::<f64>(&mut rng, Shape::Vector(3), -1.0).is_err());
    }
}
