//! Dense row-major `f64` arrays and the raw kernels the autograd graph is built on.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, stored row-major.
///
/// Zero-sized axes are allowed so that an empty token set (`N = 0`) can flow
/// through concatenation and fusion unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality of every element, with `0.0` and `-0.0` treated as equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0))
    }

    /// Slice `[start, start+len)` along axis 1 of a rank-3 tensor.
    pub fn slice_seq(&self, start: usize, len: usize) -> Result<Self> {
        let (b, l, d) = self.dims3("slice_seq")?;
        if start + len > l {
            return Err(Error::shape("slice_seq", &self.shape, &[start, len]));
        }
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = (bi * l + start) * d;
            out.extend_from_slice(&self.data[base..base + len * d]);
        }
        Tensor::new(vec![b, len, d], out)
    }

    /// Concatenate rank-3 tensors along axis 1.
    pub fn concat_seq(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_seq"))?;
        let (b, _, d) = first.dims3("concat_seq")?;
        let mut total = 0;
        for p in parts {
            let (pb, pl, pd) = p.dims3("concat_seq")?;
            if pb != b || pd != d {
                return Err(Error::shape("concat_seq", first.shape(), p.shape()));
            }
            total += pl;
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for p in parts {
                let pl = p.shape[1];
                out.extend_from_slice(&p.data[bi * pl * d..(bi + 1) * pl * d]);
            }
        }
        Tensor::new(vec![b, total, d], out)
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, l, d] => Ok((b, l, d)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0, 0])),
        }
    }
}

/// `out[r, o] = Σ_k x[r, k] · w[k, o]` for `x` viewed as `[rows, k]`.
pub(crate) fn matmul_rows(x: &[f64], w: &[f64], rows: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * o];
    for r in 0..rows {
        let xr = &x[r * k..(r + 1) * k];
        let yr = &mut out[r * o..(r + 1) * o];
        for (kk, &xv) in xr.iter().enumerate() {
            let wr = &w[kk * o..(kk + 1) * o];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
    out
}

/// Largest `f64` strictly below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, clamped into the open interval `(0, 1)`.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_sized_axis_is_allowed() {
        let t = Tensor::zeros(&[2, 0, 4]);
        assert_eq!(t.len(), 0);
        let h = Tensor::full(&[2, 3, 4], 1.5);
        let c = Tensor::concat_seq(&[&h, &t]).unwrap();
        assert!(c.bit_eq(&h));
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let t = Tensor::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.slice_seq(0, 2).unwrap();
        let b = t.slice_seq(2, 3).unwrap();
        assert_eq!(Tensor::concat_seq(&[&a, &b]).unwrap(), t);
    }

    #[test]
    fn sigmoid_is_stable_in_both_tails() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) > 0.0);
        assert!(sigmoid_scalar(800.0) < 1.0);
        assert!((sigmoid_scalar(50.0) - 1.0).abs() < 1e-12);
    }
}
