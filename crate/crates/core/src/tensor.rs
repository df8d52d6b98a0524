//! Dense row-major tensors over a generic scalar.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: String, details: String },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {data_len} does not match shape {shape:?}")]
    BadConstruction { shape: Vec<usize>, data_len: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

fn shape_err(op: &str, details: String) -> NumericError {
    NumericError::ShapeMismatch { op: op.to_string(), details }
}

/// Dense tensor: `shape` extents with row-major `data`.
/// A rank-0 tensor (empty shape) holds exactly one scalar entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericError::BadConstruction { shape, data_len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, NumericError> {
        Self::new(vec![rows, cols], data)
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Scalar value of a rank-0 or single-entry tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-singleton tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same data under a new shape of equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericError::BadConstruction { shape, data_len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self, NumericError> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose2(&self) -> Result<Self, NumericError> {
        if self.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {} tensor", self.rank())));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data })
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }
}

/// Row-major strides for a shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape for two operand shapes, numpy alignment rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, NumericError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(shape_err("broadcast", format!("{a:?} vs {b:?}")));
        }
    }
    Ok(out)
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<S: Scalar>(
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    f: impl Fn(S, S) -> S,
) -> Result<TensorBase<S>, NumericError> {
    if a.shape == b.shape {
        // fast path for the common same-shape case
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(TensorBase { shape: a.shape.clone(), data });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let rank = out_shape.len();
    let out_strides = strides(&out_shape);
    let pad = |shape: &[usize]| -> Vec<usize> {
        let mut s = vec![1usize; rank - shape.len()];
        s.extend_from_slice(shape);
        s
    };
    let (sa, sb) = (pad(&a.shape), pad(&b.shape));
    let (ta, tb) = (strides(&sa), strides(&sb));
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for flat in 0..n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            let idx = (flat / out_strides[d]) % out_shape[d];
            ia += if sa[d] == 1 { 0 } else { idx * ta[d] };
            ib += if sb[d] == 1 { 0 } else { idx * tb[d] };
        }
        data.push(f(a.data[ia], b.data[ib]));
    }
    TensorBase::new(out_shape, data)
}

/// Sum `g` down to `target` shape, inverting a broadcast.
pub fn reduce_to_shape<S: Scalar>(g: &TensorBase<S>, target: &[usize]) -> TensorBase<S> {
    if g.shape == target {
        return g.clone();
    }
    let rank = g.shape.len();
    let pad = {
        let mut s = vec![1usize; rank - target.len()];
        s.extend_from_slice(target);
        s
    };
    let g_strides = strides(&g.shape);
    let t_strides = strides(&pad);
    let mut out = TensorBase::<S>::zeros(target);
    for flat in 0..g.data.len() {
        let mut it = 0;
        for d in 0..rank {
            let idx = (flat / g_strides[d]) % g.shape[d];
            it += if pad[d] == 1 { 0 } else { idx * t_strides[d] };
        }
        out.data[it] += g.data[flat];
    }
    out
}

/// 2-D matrix product.
pub fn matmul2<S: Scalar>(
    a: &TensorBase<S>,
    b: &TensorBase<S>,
) -> Result<TensorBase<S>, NumericError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut data = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    TensorBase::new(vec![m, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn construction_checks_volume() {
        assert!(T::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(T::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = T::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = matmul2(&T::eye(3), &a).unwrap();
        assert_eq!(r, a);
    }

    #[test]
    fn broadcast_row_vector() {
        let a = T::matrix(2, 3, vec![1.0; 6]).unwrap();
        let b = T::vector(vec![1.0, 2.0, 3.0]);
        let r = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(r.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let back = reduce_to_shape(&r, &[3]);
        assert_eq!(back.data(), &[4.0, 6.0, 8.0]);
    }

    #[test]
    fn broadcast_scalar() {
        let a = T::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = T::scalar(10.0);
        let r = broadcast_zip(&a, &s, |x, y| x * y).unwrap();
        assert_eq!(r.data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = T::vector(vec![1.0, 2.0]);
        let b = T::vector(vec![1.0, 2.0, 3.0]);
        assert!(broadcast_zip(&a, &b, |x, y| x + y).is_err());
    }
}
