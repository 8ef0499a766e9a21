//! Dense row-major arrays backing every graph value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panicking constructor for shapes known to be consistent.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_vec(&[n, m], out))
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Whether `from` broadcasts to `to` under right-aligned numpy rules.
pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == to[off + i])
}

/// For every element of `to`, the flat index of the source element in `from`.
pub(crate) fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let off = to.len() - from.len();
    let fstr = strides(from);
    let n: usize = to.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        let mut src = 0;
        for (i, &fd) in from.iter().enumerate() {
            if fd != 1 {
                src += idx[off + i] * fstr[i];
            }
        }
        map.push(src);
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Block size when `small` equals `big` with its trailing axes set to 1.
fn trailing_ones(small: &[usize], big: &[usize]) -> Option<usize> {
    if small.len() != big.len() {
        return None;
    }
    let k = small.iter().zip(big).take_while(|(a, b)| a == b).count();
    if small[k..].iter().all(|&d| d == 1) {
        Some(big[k..].iter().product())
    } else {
        None
    }
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    // Fast path: trailing-row broadcast of a vector or a single scalar.
    let n: usize = shape.iter().product();
    if t.len() == 1 {
        return Tensor::full(shape, t.data[0]);
    }
    if shape.ends_with(t.shape()) && !t.shape().is_empty() {
        let m = t.len();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n / m {
            out.extend_from_slice(&t.data);
        }
        return Tensor::from_vec(shape, out);
    }
    if let Some(inner) = trailing_ones(t.shape(), shape) {
        let mut out = Vec::with_capacity(n);
        for &x in &t.data {
            out.extend(std::iter::repeat_n(x, inner));
        }
        return Tensor::from_vec(shape, out);
    }
    let map = broadcast_index_map(t.shape(), shape);
    Tensor::from_vec(shape, map.into_iter().map(|i| t.data[i]).collect())
}

/// Inverse of [`broadcast_to`]: sums `t` down to `shape`, in element order.
pub(crate) fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let m: usize = shape.iter().product();
    if m == 1 {
        return Tensor::full(shape, t.sum());
    }
    let mut out = vec![0.0; m];
    if t.shape().ends_with(shape) {
        for chunk in t.data.chunks(m) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        return Tensor::from_vec(shape, out);
    }
    if let Some(inner) = trailing_ones(shape, t.shape()) {
        for (o, chunk) in out.iter_mut().zip(t.data.chunks(inner)) {
            *o = chunk.iter().fold(0.0, |a, &x| a + x);
        }
        return Tensor::from_vec(shape, out);
    }
    let map = broadcast_index_map(shape, t.shape());
    for (&dst, &x) in map.iter().zip(&t.data) {
        out[dst] += x;
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_and_sum_are_adjoint() {
        let t = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]);
        let b = broadcast_to(&t, &[2, 3, 4]);
        assert_eq!(b.shape(), &[2, 3, 4]);
        assert_eq!(b.data()[4], 2.0);
        let s = sum_to(&b, &[3, 1]);
        assert_eq!(s.data(), &[8.0, 16.0, 24.0]);
        let row = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let rb = broadcast_to(&row, &[2, 4]);
        assert_eq!(sum_to(&rb, &[4]).data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(sum_to(&rb, &[]).item(), 20.0);
    }

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
