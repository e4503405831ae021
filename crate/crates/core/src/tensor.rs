//! Dense row-major tensors over `f32` (training/inference) or `f64`
//! (finite-difference gradient checks).
//!
//! Images and feature maps are stored channels-first `(C, H, W)`. Broadcasting
//! is deliberately limited to scalar-vs-tensor so every kernel stays a plain
//! loop over matching buffers.

use crate::error::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense N-dimensional array, row-major, `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &idx) in index.iter().enumerate() {
            debug_assert!(idx < self.shape[i]);
            off = off * self.shape[i] + idx;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterpret under a compatible shape. The buffer is moved, so a
    /// round-trip reproduces the original data bit-exactly.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape_mismatch(&self.shape, shape, "reshape"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// z[i] = sum_j w[i,j] * x[j] + b[i], the affine map computed by one dense
/// layer of neurons.
pub fn matvec_affine<S: Scalar>(
    weights: &Tensor<S>,
    x: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if weights.rank() != 2 {
        return Err(Error::shape_mismatch(
            weights.shape(),
            &[0, 0],
            "matvec_affine weights must be 2-D",
        ));
    }
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    if x.shape() != [cols] {
        return Err(Error::shape_mismatch(
            weights.shape(),
            x.shape(),
            "matvec_affine inner extents",
        ));
    }
    if bias.shape() != [rows] {
        return Err(Error::shape_mismatch(
            weights.shape(),
            bias.shape(),
            "matvec_affine bias extent",
        ));
    }
    let w = weights.data();
    let xv = x.data();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        out.push(crate::layers::dot_lanes(row, xv) + bias.data()[i]);
    }
    Tensor::new(vec![rows], out)
}

/// Elementwise binary operations over equal-shape tensors or tensor-scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl ElemOp {
    #[inline]
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            ElemOp::Div => a / b,
            ElemOp::Max => a.maximum(b),
        }
    }
}

pub fn elementwise<S: Scalar>(op: ElemOp, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape(), "elementwise"));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| op.apply(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn elementwise_scalar<S: Scalar>(op: ElemOp, a: &Tensor<S>, b: S) -> Tensor<S> {
    a.map(|v| op.apply(v, b))
}

/// Elementwise exp. NaN/Inf propagate; callers detect them.
pub fn exp<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(|v| v.exp())
}

/// Elementwise natural log; rejects non-positive inputs.
pub fn log<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.data().iter().any(|&v| v <= S::ZERO) {
        return Err(Error::Domain("log of non-positive value".into()));
    }
    Ok(a.map(|v| v.ln()))
}

pub fn sum_all<S: Scalar>(a: &Tensor<S>) -> S {
    let mut acc = S::ZERO;
    for &v in a.data() {
        acc += v;
    }
    acc
}

pub fn mean_all<S: Scalar>(a: &Tensor<S>) -> S {
    sum_all(a) / S::from_f64(a.len() as f64)
}

pub fn max_all<S: Scalar>(a: &Tensor<S>) -> S {
    let mut best = a.data()[0];
    for &v in &a.data()[1..] {
        best = best.maximum(v);
    }
    best
}

/// Index of the maximum element; ties break to the lowest index.
pub fn argmax_all<S: Scalar>(a: &Tensor<S>) -> usize {
    let mut best = 0;
    for (i, &v) in a.data().iter().enumerate().skip(1) {
        if v > a.data()[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduce along one axis; the output drops that axis (rank 1 inputs reduce
/// to a scalar tensor).
pub fn reduce_axis<S: Scalar>(op: ReduceOp, a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= a.rank() {
        return Err(Error::Domain(format!(
            "reduce axis {axis} out of range for rank {}",
            a.rank()
        )));
    }
    let shape = a.shape();
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape[..axis].to_vec();
    out_shape.extend_from_slice(&shape[axis + 1..]);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = vec![S::ZERO; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut acc = a.data()[base];
            for k in 1..extent {
                let v = a.data()[base + k * inner];
                acc = match op {
                    ReduceOp::Sum | ReduceOp::Mean => acc + v,
                    ReduceOp::Max => acc.maximum(v),
                };
            }
            if let ReduceOp::Mean = op {
                acc = acc / S::from_f64(extent as f64);
            }
            out[o * inner + i] = acc;
        }
    }
    Tensor::new(out_shape, out)
}

/// Argmax along one axis; ties break to the lowest index.
pub fn argmax_axis<S: Scalar>(a: &Tensor<S>, axis: usize) -> Result<Vec<usize>> {
    if axis >= a.rank() {
        return Err(Error::Domain(format!(
            "argmax axis {axis} out of range for rank {}",
            a.rank()
        )));
    }
    let shape = a.shape();
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut best = 0;
            for k in 1..extent {
                if a.data()[base + k * inner] > a.data()[base + best * inner] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Bilinear resize of a single `(H, W)` plane to `(out_h, out_w)`.
///
/// Sample positions use the align-corners convention: corner pixels of input
/// and output coincide, which keeps a 2x downscale and the matching upscale
/// mutually consistent.
pub fn resize_bilinear<S: Scalar>(plane: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if plane.rank() != 2 {
        return Err(Error::shape_mismatch(
            plane.shape(),
            &[0, 0],
            "resize_bilinear expects (H, W)",
        ));
    }
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target extents must be >= 1".into()));
    }
    let scale_y = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = oy as f64 * scale_y;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * scale_x;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let p00 = plane.data()[y0 * w + x0].to_f64();
            let p01 = plane.data()[y0 * w + x1].to_f64();
            let p10 = plane.data()[y1 * w + x0].to_f64();
            let p11 = plane.data()[y1 * w + x1].to_f64();
            let top = p00 + (p01 - p00) * dx;
            let bottom = p10 + (p11 - p10) * dx;
            out.push(S::from_f64(top + (bottom - top) * dy));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity() {
        let w = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(vec![3.0f32, 4.0]);
        let b = Tensor::from_vec(vec![0.0f32, 0.0]);
        let z = matvec_affine(&w, &x, &b).unwrap();
        assert_eq!(z.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matvec_scalar_case() {
        let w = Tensor::new(vec![1, 1], vec![2.0f32]).unwrap();
        let x = Tensor::from_vec(vec![3.0f32]);
        let b = Tensor::from_vec(vec![1.0f32]);
        assert_eq!(matvec_affine(&w, &x, &b).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        let x = Tensor::<f32>::zeros(&[4]);
        let b = Tensor::zeros(&[2]);
        let err = matvec_affine(&w, &x, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    // Naive triple-loop oracle for the affine map.
    fn matvec_naive(w: &Tensor<f32>, x: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0f32; rows];
        for i in 0..rows {
            for j in 0..cols {
                out[i] += w.at(&[i, j]) * x.at(&[j]);
            }
            out[i] += b.at(&[i]);
        }
        out
    }

    #[test]
    fn matvec_matches_naive_oracle_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let rows = rng.gen_range(1..=8);
            let cols = rng.gen_range(1..=8);
            let w = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let x = Tensor::from_vec((0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b = Tensor::from_vec((0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let fast = matvec_affine(&w, &x, &b).unwrap();
            let slow = matvec_naive(&w, &x, &b);
            for (a, e) in fast.data().iter().zip(&slow) {
                assert!((a - e).abs() < 1e-6, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::from_vec(vec![1.0f32, 2.0]);
        let b = Tensor::from_vec(vec![3.0f32, 4.0]);
        assert_eq!(elementwise(ElemOp::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise_scalar(ElemOp::Mul, &a, 0.0).data(), &[0.0, 0.0]);
        assert_eq!(exp(&Tensor::from_vec(vec![0.0f32])).data(), &[1.0]);
        assert!(log(&Tensor::from_vec(vec![-1.0f32])).is_err());
        let c = Tensor::from_vec(vec![1.0f32]);
        assert!(elementwise(ElemOp::Add, &a, &c).is_err());
    }

    #[test]
    fn reductions() {
        let a = Tensor::from_vec(vec![1.0f32, 2.0, 3.0]);
        assert_eq!(sum_all(&a), 6.0);
        assert_eq!(argmax_all(&Tensor::from_vec(vec![0.1f32, 0.7, 0.2])), 1);
        let ones = Tensor::<f32>::filled(&[4, 4], 1.0);
        assert_eq!(mean_all(&ones), 1.0);
        let m = Tensor::new(vec![2, 3], vec![1.0f32, 5.0, 2.0, 4.0, 0.0, 3.0]).unwrap();
        let rows = reduce_axis(ReduceOp::Sum, &m, 1).unwrap();
        assert_eq!(rows.data(), &[8.0, 7.0]);
        let cols = reduce_axis(ReduceOp::Max, &m, 0).unwrap();
        assert_eq!(cols.data(), &[4.0, 5.0, 3.0]);
        assert_eq!(argmax_axis(&m, 1).unwrap(), vec![1, 0]);
        assert!(reduce_axis(ReduceOp::Sum, &m, 2).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_all(&Tensor::from_vec(vec![0.5f32, 0.5, 0.5])), 0);
    }

    #[test]
    fn invariants_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f32]).is_err());
        assert!(Tensor::new(vec![0], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn resize_halves_extents() {
        let plane = Tensor::<f32>::filled(&[96, 96], 0.25);
        let small = resize_bilinear(&plane, 48, 48).unwrap();
        assert_eq!(small.shape(), &[48, 48]);
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn reshape_round_trip_is_bit_exact(
            data in proptest::collection::vec(-1e6f32..1e6, 1..64),
        ) {
            let n = data.len();
            let t = Tensor::from_vec(data.clone());
            // any compatible factorization and back
            let reshaped = t.clone().reshape(&[1, n]).unwrap().reshape(&[n, 1]).unwrap();
            let back = reshaped.reshape(&[n]).unwrap();
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
