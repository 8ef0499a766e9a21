//! Composite operations assembled from graph primitives.
//!
//! Everything here is differentiable to any order because it is only a
//! composition of primitives.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    /// `x + b` with `b` broadcast over leading dimensions.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bb = self.broadcast_to(b, &s)?;
        self.add(x, bb)
    }

    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bb = self.broadcast_to(b, &s)?;
        self.mul(x, bb)
    }

    /// `x W + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let m = self.max_axis(x, axis)?;
        let m = self.detach(m);
        let mb = self.broadcast_to(m, &s)?;
        let z = self.sub(x, mb)?;
        let e = self.exp(z);
        let den = self.sum_axis(e, axis)?;
        let den = self.broadcast_to(den, &s)?;
        self.div(e, den)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let m = self.max_axis(x, axis)?;
        let m = self.detach(m);
        let mb = self.broadcast_to(m, &s)?;
        let z = self.sub(x, mb)?;
        let e = self.exp(z);
        let den = self.sum_axis(e, axis)?;
        let lden = self.log(den);
        let lden = self.broadcast_to(lden, &s)?;
        self.sub(z, lden)
    }

    /// Layer normalisation over the last axis with optional affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let axis = s.len() - 1;
        let d = s[axis] as f64;
        let sum = self.sum_axis(x, axis)?;
        let mean = self.scale(sum, 1.0 / d);
        let mean = self.broadcast_to(mean, &s)?;
        let xc = self.sub(x, mean)?;
        let sq = self.square(xc);
        let var = self.sum_axis(sq, axis)?;
        let var = self.scale(var, 1.0 / d);
        let var = self.add_scalar(var, eps);
        let inv = self.powf(var, -0.5);
        let inv = self.broadcast_to(inv, &s)?;
        let mut y = self.mul(xc, inv)?;
        if let Some(g) = gamma {
            y = self.mul_broadcast(y, g)?;
        }
        if let Some(b) = beta {
            y = self.add_broadcast(y, b)?;
        }
        Ok(y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        const OK: &str = "elementwise on one shape";
        let x3 = self.powf(x, 3.0);
        let x3 = self.scale(x3, 0.044_715);
        let inner = self.add(x, x3).expect(OK);
        let inner = self.scale(inner, GELU_C);
        let t = self.tanh(inner);
        let t = self.add_scalar(t, 1.0);
        let y = self.mul(x, t).expect(OK);
        self.scale(y, 0.5)
    }

    /// Inner product of two same-shaped values as a scalar.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Constant filled with `v`, shaped like `like`.
    pub fn full_like(&mut self, like: Var, v: f64) -> Var {
        let t = Tensor::full(self.shape(like), v);
        self.constant(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.item(y), 0.5);
    }

    #[test]
    fn layernorm_rows_are_standardised() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 4], vec![1., 2., 3., 4., -1., 0., 5., 2.]));
        let y = g.layernorm(x, None, None, 0.0).unwrap();
        let t = g.value(y);
        for r in 0..2 {
            let row = t.row(r);
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3], vec![0.3, -2.0, 5.0, 1.0, 1.0, 0.0]));
        let a = g.log_softmax(x, 1).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let b = g.log(s);
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
