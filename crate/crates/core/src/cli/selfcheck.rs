//! Fast oracle suite run by the `selfcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocator::{allocate, allocate_bruteforce, SensitivityTable, TableRow};
use crate::autodiff::{check_gradient, hvp, GradCheckOptions, GradMap, Graph, HvpMode, Tensor, Var};
use crate::error::Result;
use crate::matching::hungarian;
use crate::model::{forward_graph, gen_dataset, init_model, DatasetSpec, ModelConfig};
use crate::objectives::{objective_loss, CriticalSpec, LossWeights, Objective};
use crate::quantizer::{quant_error, quantize, step_size};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

pub fn run_selfcheck(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check("quantizer.algebra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..2000 {
            let bits = rng.gen_range(3..=8);
            let t = rand_vec(&mut rng, 16);
            let q = quantize(&t, bits);
            let neg: Vec<f64> = t.iter().map(|x| -x).collect();
            let s = step_size(&t, bits);
            let ok = quantize(&q, bits) == q
                && quantize(&neg, bits).iter().zip(&q).all(|(a, b)| *a == -b)
                && quant_error(&t, bits).iter().all(|d| d.abs() <= s / 2.0 + 1e-15);
            if !ok {
                return Ok((false, format!("violated at {bits} bits")));
            }
        }
        Ok((true, "2000 tensors".into()))
    }));
    out.push(check("autodiff.detector_gradient", || {
        let model = ModelConfig {
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 8,
            queries: 4,
            seed,
            ..Default::default()
        };
        let (data, _) = gen_dataset(&DatasetSpec {
            train_images: 1,
            val_images: 0,
            seed,
            ..Default::default()
        })?;
        let p = init_model(&model)?.tensors();
        let w = LossWeights::default();
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let (l, b) = forward_graph(g, &model, v, &data[0].image)?;
            objective_loss(g, l, b, &data[0].objects, &Objective::Overall, &w)
        };
        let r = check_gradient(
            &f,
            &p,
            &GradCheckOptions {
                step: 1e-4,
                max_per_param: Some(3),
                ..Default::default()
            },
        )?;
        Ok((r.max_rel_error < 1e-4, format!("max rel error {:.2e}", r.max_rel_error)))
    }));
    out.push(check("autodiff.hvp_modes_agree", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vec![
            Tensor::from_vec(&[3, 4], rand_vec(&mut rng, 12)),
            Tensor::from_vec(&[4, 1], rand_vec(&mut rng, 4)),
        ];
        let x = Tensor::from_vec(&[5, 3], rand_vec(&mut rng, 15));
        let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let xc = g.constant(x.clone());
            let h = g.matmul(xc, v[0])?;
            let h = g.tanh(h);
            let o = g.matmul(h, v[1])?;
            let s = g.square(o);
            Ok(g.sum(s))
        };
        let v = GradMap(p.iter().map(|t| Tensor::from_vec(t.shape(), rand_vec(&mut rng, t.len()))).collect());
        let a = hvp(&f, &p, &v, HvpMode::Exact)?;
        let b = hvp(&f, &p, &v, HvpMode::finite_difference())?;
        let rel = a.sub(&b).norm() / a.norm();
        Ok((rel < 1e-3, format!("relative L2 {rel:.2e}")))
    }));
    out.push(check("matching.hungarian_bruteforce", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let n = 5;
            let c = Tensor::from_vec(&[n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect());
            let a = hungarian(&c);
            let mut best = f64::INFINITY;
            permutations(n, &mut |p| {
                best = best.min((0..n).map(|j| c.data()[p[j] * n + j]).sum());
            });
            if (a.total(&c) - best).abs() > 1e-9 {
                return Ok((false, format!("{} vs {best}", a.total(&c))));
            }
        }
        Ok((true, "100 random 5x5".into()))
    }));
    out.push(check("allocator.bruteforce", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let rows = (0..4)
                .map(|i| {
                    let mut o = rng.gen_range(0.5..10.0);
                    let mut omega = [0.0; 6];
                    for x in omega.iter_mut() {
                        *x = o;
                        o *= rng.gen_range(0.1..0.7);
                    }
                    TableRow {
                        name: format!("l{i}"),
                        elements: rng.gen_range(1..30),
                        omega,
                        fisher_trace: 0.0,
                    }
                })
                .collect();
            let t = SensitivityTable {
                objective: "selfcheck".into(),
                rows,
            };
            let b = rng.gen_range(t.min_budget()..=t.max_budget());
            let (a, e) = (allocate(&t, b)?, allocate_bruteforce(&t, b)?);
            if (a.objective - e.objective).abs() > 1e-12 * e.objective.abs().max(1.0) {
                return Ok((false, format!("{} vs {}", a.objective, e.objective)));
            }
        }
        Ok((true, "100 random 4-layer tables".into()))
    }));
    out.push(check("objectives.critical_transform", || {
        let s = CriticalSpec::new(vec![1, 2], 5)?;
        let row = Tensor::from_vec(&[1, 6], vec![0.1, 0.2, 0.7, -0.3, 0.5, 0.9]);
        let t = s.transform(&row);
        Ok((t.data() == [0.1, 0.2, 0.7, 0.9], format!("{:?}", t.data())))
    }));
    out
}

/// Visits every permutation of `0..n` (Heap's algorithm).
fn permutations(n: usize, visit: &mut impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    visit(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            visit(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}
