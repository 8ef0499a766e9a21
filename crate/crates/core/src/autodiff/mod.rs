//! Minimal reverse-mode automatic differentiation with second-order support.

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::{
    check_gradient, evaluate, gradient, gradient_with, hvp, hvp_with, offset, GradCheckOptions,
    GradCheckReport, GradMap, HvpMode,
};
pub use graph::{Graph, Precision, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn square_derivative() {
        let f = |g: &mut Graph, p: &[Var]| {
            let s = g.square(p[0]);
            Ok(g.sum(s))
        };
        let (v, grad) = gradient(&f, &[Tensor::scalar(3.0)]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grad.0[0].item(), 6.0);
    }

    #[test]
    fn softmax_onehot_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[5]);
        let f = |g: &mut Graph, p: &[Var]| {
            let s = g.softmax(p[0], 0)?;
            let oh = g.constant(Tensor::from_vec(&[5], vec![0., 0., 1., 0., 0.]));
            g.inner(s, oh)
        };
        let (_, grad) = gradient(&f, std::slice::from_ref(&x)).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let num = (evaluate(&f, &[xp], Precision::F64).unwrap()
                - evaluate(&f, &[xm], Precision::F64).unwrap())
                / (2.0 * h);
            let a = grad.0[0].data()[j];
            assert!((a - num).abs() / a.abs().max(1e-12) < 1e-6, "{a} vs {num}");
        }
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let f = |g: &mut Graph, p: &[Var]| Ok(g.sum(p[0]));
        let (_, grad) = gradient(&f, &[Tensor::ones(&[2]), Tensor::ones(&[3])]).unwrap();
        assert_eq!(grad.0[1], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_target_is_an_error() {
        let f = |g: &mut Graph, p: &[Var]| Ok(g.exp(p[0]));
        assert!(gradient(&f, &[Tensor::ones(&[2])]).is_err());
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let pos = a.map(|v| v.abs() + 0.5);
        let weights = rand_tensor(&mut rng, &[3, 4]);

        // Each case reduces through a random weighting so the gradient is not trivial.
        type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
        let wt = weights.clone();
        let reduce = move |g: &mut Graph, y: Var| -> Result<Var> {
            if g.shape(y) == [3, 4] {
                let c = g.constant(wt.clone());
                g.inner(y, c)
            } else {
                let s = g.square(y);
                Ok(g.sum(s))
            }
        };
        let r = std::rc::Rc::new(reduce);
        let mk = |body: fn(&mut Graph, &[Var]) -> Result<Var>| -> Case {
            let r = r.clone();
            Box::new(move |g, p| {
                let y = body(g, p)?;
                r(g, y)
            })
        };
        let cases: Vec<(&str, Case, Vec<Tensor>)> = vec![
            ("add", mk(|g, p| g.add(p[0], p[1])), vec![a.clone(), b.clone()]),
            ("sub", mk(|g, p| g.sub(p[0], p[1])), vec![a.clone(), b.clone()]),
            ("mul", mk(|g, p| g.mul(p[0], p[1])), vec![a.clone(), b.clone()]),
            ("div", mk(|g, p| g.div(p[0], p[1])), vec![a.clone(), pos.clone()]),
            ("maximum", mk(|g, p| g.maximum(p[0], p[1])), vec![a.clone(), b.clone()]),
            ("minimum", mk(|g, p| g.minimum(p[0], p[1])), vec![a.clone(), b.clone()]),
            ("neg", mk(|g, p| Ok(g.neg(p[0]))), vec![a.clone()]),
            ("scale", mk(|g, p| Ok(g.scale(p[0], -2.5))), vec![a.clone()]),
            ("exp", mk(|g, p| Ok(g.exp(p[0]))), vec![a.clone()]),
            ("log", mk(|g, p| Ok(g.log(p[0]))), vec![pos.clone()]),
            ("tanh", mk(|g, p| Ok(g.tanh(p[0]))), vec![a.clone()]),
            ("sigmoid", mk(|g, p| Ok(g.sigmoid(p[0]))), vec![a.clone()]),
            ("relu", mk(|g, p| Ok(g.relu(p[0]))), vec![a.clone()]),
            ("gelu", mk(|g, p| Ok(g.gelu(p[0]))), vec![a.clone()]),
            ("abs", mk(|g, p| Ok(g.abs(p[0]))), vec![a.clone()]),
            ("powf", mk(|g, p| Ok(g.powf(p[0], -0.5))), vec![pos.clone()]),
            ("matmul", mk(|g, p| g.matmul(p[0], p[1])), vec![a.clone(), w.clone()]),
            ("transpose", mk(|g, p| g.transpose(p[0])), vec![a.clone()]),
            ("reshape", mk(|g, p| g.reshape(p[0], &[6, 2])), vec![a.clone()]),
            (
                "broadcast",
                mk(|g, p| {
                    let r = g.narrow(p[0], 0, 0, 1)?;
                    g.broadcast_to(r, &[3, 4])
                }),
                vec![a.clone()],
            ),
            ("sum_axis", mk(|g, p| g.sum_axis(p[0], 1)), vec![a.clone()]),
            ("mean", mk(|g, p| Ok(g.mean(p[0]))), vec![a.clone()]),
            ("max_axis", mk(|g, p| g.max_axis(p[0], 1)), vec![a.clone()]),
            ("softmax", mk(|g, p| g.softmax(p[0], 1)), vec![a.clone()]),
            ("log_softmax", mk(|g, p| g.log_softmax(p[0], 0)), vec![a.clone()]),
            (
                "layernorm",
                mk(|g, p| g.layernorm(p[0], Some(p[1]), Some(p[2]), 1e-5)),
                vec![a.clone(), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])],
            ),
            ("narrow", mk(|g, p| g.narrow(p[0], 1, 1, 2)), vec![a.clone()]),
            ("pad", mk(|g, p| g.pad(p[0], 0, 1, 5)), vec![a.clone()]),
            (
                "concat",
                mk(|g, p| g.concat(&[p[0], p[1]], 1)),
                vec![a.clone(), b.clone()],
            ),
            ("index_select", mk(|g, p| g.index_select(p[0], 1, &[3, 0, 3])), vec![a.clone()]),
            ("index_add", mk(|g, p| g.index_add(p[0], 0, &[2, 0, 2], 4)), vec![a.clone()]),
        ];
        for (name, f, params) in cases {
            let r = check_gradient(&f, &params, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn linear_function_gradient_is_exact() {
        let c = Tensor::from_vec(&[3], vec![0.5, -2.0, 3.0]);
        let f = move |g: &mut Graph, p: &[Var]| {
            let k = g.constant(c.clone());
            g.inner(p[0], k)
        };
        let r = check_gradient(&f, &[Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3])], &GradCheckOptions::default())
            .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let f = |g: &mut Graph, p: &[Var]| {
            let z = g.scale(p[0], 0.0);
            Ok(g.sum(z))
        };
        let r = check_gradient(&f, &[Tensor::ones(&[4])], &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
    }

    fn quadratic(g: &mut Graph, p: &[Var]) -> Result<Var> {
        // f = 1/2 x^T A x with A = diag(2, 4)
        let a = g.constant(Tensor::from_vec(&[2], vec![2.0, 4.0]));
        let x2 = g.square(p[0]);
        let y = g.inner(x2, a)?;
        Ok(g.scale(y, 0.5))
    }

    #[test]
    fn hvp_of_diagonal_quadratic() {
        let v = GradMap(vec![Tensor::from_vec(&[2], vec![1.0, 1.0])]);
        let x = [Tensor::from_vec(&[2], vec![0.3, -0.7])];
        for mode in [HvpMode::Exact, HvpMode::finite_difference()] {
            let hv = hvp(&quadratic, &x, &v, mode).unwrap();
            let d = hv.0[0].data();
            assert!((d[0] - 2.0).abs() < 1e-8 && (d[1] - 4.0).abs() < 1e-8, "{mode:?}: {d:?}");
        }
    }

    #[test]
    fn hvp_of_zero_vector_is_zero() {
        let v = GradMap(vec![Tensor::zeros(&[2])]);
        let x = [Tensor::from_vec(&[2], vec![0.3, -0.7])];
        for mode in [HvpMode::Exact, HvpMode::finite_difference()] {
            let hv = hvp(&quadratic, &x, &v, mode).unwrap();
            assert_eq!(hv.0[0], Tensor::zeros(&[2]));
        }
    }

    fn mlp_loss(g: &mut Graph, p: &[Var]) -> Result<Var> {
        let x = g.constant(Tensor::from_vec(
            &[3, 4],
            (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect(),
        ));
        let h = g.linear(x, p[0], Some(p[1]))?;
        let h = g.gelu(h);
        let h = g.layernorm(h, None, None, 1e-5)?;
        let o = g.linear(h, p[2], None)?;
        let ls = g.log_softmax(o, 1)?;
        let t = g.constant(Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 0., 1., 0., 1., 0.]));
        let ce = g.inner(ls, t)?;
        Ok(g.neg(ce))
    }

    #[test]
    fn exact_and_finite_difference_hvp_agree_on_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6, 3]),
        ];
        let v = GradMap(params.iter().map(|p| rand_tensor(&mut rng, p.shape())).collect());
        let e = hvp(&mlp_loss, &params, &v, HvpMode::Exact).unwrap();
        let f = hvp(&mlp_loss, &params, &v, HvpMode::finite_difference()).unwrap();
        let rel = e.sub(&f).norm() / e.norm();
        assert!(rel < 1e-4, "relative discrepancy {rel}");
    }

    #[test]
    fn hvp_is_linear_in_v_for_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_tensor(&mut rng, &[4, 4]);
        let sym = m.add(&m.transpose2());
        let f = move |g: &mut Graph, p: &[Var]| {
            let a = g.constant(sym.clone());
            let x = g.reshape(p[0], &[4, 1])?;
            let ax = g.matmul(a, x)?;
            let y = g.inner(x, ax)?;
            Ok(g.scale(y, 0.5))
        };
        let x = [rand_tensor(&mut rng, &[4])];
        let v1 = GradMap(vec![rand_tensor(&mut rng, &[4])]);
        let v2 = GradMap(vec![rand_tensor(&mut rng, &[4])]);
        let alpha = 1.7;
        let mut comb = v1.scale(alpha);
        comb.axpy(1.0, &v2);
        let lhs = hvp(&f, &x, &comb, HvpMode::Exact).unwrap();
        let mut rhs = hvp(&f, &x, &v1, HvpMode::Exact).unwrap().scale(alpha);
        rhs.axpy(1.0, &hvp(&f, &x, &v2, HvpMode::Exact).unwrap());
        assert!(lhs.sub(&rhs).norm() < 1e-8);
    }

    #[test]
    fn repeated_differentiation_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6, 3]),
        ];
        let (v1, g1) = gradient(&mlp_loss, &params).unwrap();
        let (v2, g2) = gradient(&mlp_loss, &params).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        let y = g.scale(x, 1.0);
        assert_eq!(g.item(y), 0.1f32 as f64);
    }
}
