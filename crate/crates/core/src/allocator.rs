//! Exact per-layer bit allocation under a total-size budget, solved as a
//! multiple-choice knapsack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::params::ParamSet;
use crate::quantizer::{QuantConfig, MAX_BITS, MIN_BITS};
use crate::sensitivity::{fisher_trace, layer_sensitivity, FisherDiag};

pub const BIT_CHOICES: [u32; 6] = [3, 4, 5, 6, 7, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub elements: u64,
    /// Ω at 3..=8 bits.
    pub omega: [f64; 6],
    pub fisher_trace: f64,
}

impl TableRow {
    pub fn omega_at(&self, bits: u32) -> f64 {
        self.omega[(bits - MIN_BITS) as usize]
    }
}

/// Ω per non-exempt layer and bit-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub objective: String,
    pub rows: Vec<TableRow>,
}

impl SensitivityTable {
    pub fn total_elements(&self) -> u64 {
        self.rows.iter().map(|r| r.elements).sum()
    }

    pub fn min_budget(&self) -> u64 {
        MIN_BITS as u64 * self.total_elements()
    }

    pub fn max_budget(&self) -> u64 {
        MAX_BITS as u64 * self.total_elements()
    }

    /// Budget for an average of `bits` per non-exempt weight.
    pub fn budget_for_average(&self, bits: f64) -> u64 {
        (bits * self.total_elements() as f64).floor() as u64
    }

    /// `layer,bits,omega` with one line per layer and bit-width.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,bits,omega\n");
        for r in &self.rows {
            for (i, o) in r.omega.iter().enumerate() {
                s.push_str(&format!("{},{},{:e}\n", r.name, BIT_CHOICES[i], o));
            }
        }
        s
    }
}

pub fn build_table(params: &ParamSet, fisher: &FisherDiag) -> Result<SensitivityTable> {
    fisher.check_congruent(params)?;
    let slots = params.slots();
    let jobs: Vec<(usize, usize)> = params
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.exempt)
        .map(|(i, _)| (i, slots[i].0))
        .collect();
    let rows = par_map(&jobs, |&(i, w)| {
        let layer = &params.layers()[i];
        let mut omega = [0.0; 6];
        for (k, &b) in BIT_CHOICES.iter().enumerate() {
            omega[k] = layer_sensitivity(&layer.weight, &fisher.diag.0[w], b);
        }
        Ok(TableRow {
            name: layer.name.clone(),
            elements: layer.element_count() as u64,
            omega,
            fisher_trace: fisher_trace(fisher, params, Some(&layer.name))?,
        })
    });
    Ok(SensitivityTable {
        objective: fisher.objective.clone(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAssignment {
    pub format_version: u32,
    pub objective_tag: String,
    /// `(layer, bits)` in table order.
    pub bits: Vec<(String, u32)>,
    pub objective: f64,
    pub size_bits: u64,
    pub budget_bits: u64,
    pub average_bits: f64,
    /// Exempt layers are excluded from both the budget and the size.
    pub budget_note: String,
}

impl BitAssignment {
    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig::from_bits(self.bits.iter().cloned().collect::<BTreeMap<_, _>>())
    }

    /// `layer,sensitivity,bits,fisher_trace`; sensitivity is Ω at the assigned width.
    pub fn to_csv(&self, table: &SensitivityTable) -> String {
        let mut s = String::from("layer,sensitivity,bits,fisher_trace\n");
        for (r, (_, b)) in table.rows.iter().zip(&self.bits) {
            s.push_str(&format!("{},{:e},{},{:e}\n", r.name, r.omega_at(*b), b, r.fisher_trace));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocOptions {
    /// Largest DP table (layers × capacity units) before switching to branch and bound.
    pub dp_cap: usize,
}

impl Default for AllocOptions {
    fn default() -> Self {
        AllocOptions { dp_cap: 50_000_000 }
    }
}

/// Right-associated sum `o0 + (o1 + (... + on))`, the order the DP uses.
fn objective_of(table: &SensitivityTable, bits: &[u32]) -> f64 {
    table
        .rows
        .iter()
        .zip(bits)
        .rev()
        .fold(None, |acc: Option<f64>, (r, &b)| {
            let o = r.omega_at(b);
            Some(match acc {
                None => o,
                Some(a) => o + a,
            })
        })
        .unwrap_or(0.0)
}

fn size_of(table: &SensitivityTable, bits: &[u32]) -> u64 {
    table.rows.iter().zip(bits).map(|(r, &b)| b as u64 * r.elements).sum()
}

/// Strict preference: lower objective, then more bits, then lexicographically larger widths.
fn better(a: (f64, u64, &[u32]), b: (f64, u64, &[u32])) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    a.2 > b.2
}

fn check_budget(table: &SensitivityTable, budget: u64) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::config("sensitivity table has no quantizable layers"));
    }
    if table.rows.iter().any(|r| r.elements == 0) {
        return Err(Error::config("layers must have at least one weight"));
    }
    let minimum = table.min_budget();
    if budget < minimum {
        return Err(Error::Infeasible { budget, minimum });
    }
    Ok(())
}

fn finish(table: &SensitivityTable, budget: u64, bits: Vec<u32>) -> BitAssignment {
    let size = size_of(table, &bits);
    BitAssignment {
        format_version: crate::model::io::FORMAT_VERSION,
        objective_tag: table.objective.clone(),
        objective: objective_of(table, &bits),
        size_bits: size,
        budget_bits: budget,
        average_bits: size as f64 / table.total_elements() as f64,
        bits: table.rows.iter().map(|r| r.name.clone()).zip(bits).collect(),
        budget_note: "exempt layers excluded from budget and size".into(),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn allocate(table: &SensitivityTable, budget: u64) -> Result<BitAssignment> {
    allocate_with(table, budget, &AllocOptions::default())
}

/// Exact optimum by dynamic programming over budget units of
/// `gcd(elements)` bits, or branch and bound above `opts.dp_cap`.
pub fn allocate_with(table: &SensitivityTable, budget: u64, opts: &AllocOptions) -> Result<BitAssignment> {
    check_budget(table, budget)?;
    let unit = table.rows.iter().fold(0, |g, r| gcd(g, r.elements));
    let span = (table.max_budget() - table.min_budget()) / unit;
    let cap = ((budget - table.min_budget()) / unit).min(span) as usize;
    let bits = if table.rows.len().saturating_mul(cap + 1) <= opts.dp_cap {
        solve_dp(table, unit, cap)
    } else {
        solve_bb(table, budget)
    };
    Ok(finish(table, budget, bits))
}

/// `best[i][c]` is the preferred (objective, bits) over layers `i..` using at
/// most `c` extra units above the 3-bit floor.
fn solve_dp(table: &SensitivityTable, unit: u64, cap: usize) -> Vec<u32> {
    let l = table.rows.len();
    let extra: Vec<Vec<usize>> = table
        .rows
        .iter()
        .map(|r| BIT_CHOICES.iter().map(|&b| ((b - MIN_BITS) as u64 * r.elements / unit) as usize).collect())
        .collect();
    let mut best = vec![vec![(0.0f64, 0u64); cap + 1]; l + 1];
    for i in (0..l).rev() {
        let r = &table.rows[i];
        for c in 0..=cap {
            let mut cur: Option<(f64, u64)> = None;
            for k in (0..BIT_CHOICES.len()).rev() {
                if extra[i][k] > c {
                    continue;
                }
                let (o, b) = best[i + 1][c - extra[i][k]];
                let cand = if i + 1 == l {
                    (r.omega[k], BIT_CHOICES[k] as u64 * r.elements)
                } else {
                    (r.omega[k] + o, b + BIT_CHOICES[k] as u64 * r.elements)
                };
                if cur.map_or(true, |x| cand.0 < x.0 || (cand.0 == x.0 && cand.1 > x.1)) {
                    cur = Some(cand);
                }
            }
            best[i][c] = cur.expect("3 bits always fits");
        }
    }
    let mut out = Vec::with_capacity(l);
    let mut c = cap;
    for i in 0..l {
        let target = best[i][c];
        let r = &table.rows[i];
        let k = (0..BIT_CHOICES.len())
            .rev()
            .find(|&k| {
                if extra[i][k] > c {
                    return false;
                }
                let (o, b) = best[i + 1][c - extra[i][k]];
                let cand = if i + 1 == l {
                    (r.omega[k], BIT_CHOICES[k] as u64 * r.elements)
                } else {
                    (r.omega[k] + o, b + BIT_CHOICES[k] as u64 * r.elements)
                };
                cand == target
            })
            .expect("optimum is reachable");
        out.push(BIT_CHOICES[k]);
        c -= extra[i][k];
    }
    out
}

fn solve_bb(table: &SensitivityTable, budget: u64) -> Vec<u32> {
    let l = table.rows.len();
    // Cheapest completion of layers i.. ignoring the budget.
    let mut tail_min = vec![0.0; l + 1];
    let mut tail_floor = vec![0u64; l + 1];
    for i in (0..l).rev() {
        let m = table.rows[i].omega.iter().copied().fold(f64::INFINITY, f64::min);
        tail_min[i] = tail_min[i + 1] + m;
        tail_floor[i] = tail_floor[i + 1] + MIN_BITS as u64 * table.rows[i].elements;
    }
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    let mut cur = Vec::with_capacity(l);
    #[allow(clippy::too_many_arguments)]
    fn go(
        t: &SensitivityTable,
        i: usize,
        used: u64,
        partial: f64,
        budget: u64,
        tail_min: &[f64],
        tail_floor: &[u64],
        cur: &mut Vec<u32>,
        best: &mut Option<(f64, u64, Vec<u32>)>,
    ) {
        if i == t.rows.len() {
            let o = objective_of(t, cur);
            if best.as_ref().map_or(true, |b| better((o, used, cur), (b.0, b.1, &b.2))) {
                *best = Some((o, used, cur.clone()));
            }
            return;
        }
        if let Some(b) = best {
            let bound = partial + tail_min[i];
            if bound > b.0 + 1e-12 * b.0.abs().max(1e-300) {
                return;
            }
        }
        let r = &t.rows[i];
        for (k, &q) in BIT_CHOICES.iter().enumerate().rev() {
            let u = used + q as u64 * r.elements;
            if u + tail_floor[i + 1] > budget {
                continue;
            }
            cur.push(q);
            go(t, i + 1, u, partial + r.omega[k], budget, tail_min, tail_floor, cur, best);
            cur.pop();
        }
    }
    go(table, 0, 0, 0.0, budget, &tail_min, &tail_floor, &mut cur, &mut best);
    best.expect("minimum budget is feasible").2
}

/// Exhaustive search with the same preference order; at most 10 layers.
pub fn allocate_bruteforce(table: &SensitivityTable, budget: u64) -> Result<BitAssignment> {
    if table.rows.len() > 10 {
        return Err(Error::config("exhaustive allocation supports at most 10 layers"));
    }
    check_budget(table, budget)?;
    let l = table.rows.len();
    let mut idx = vec![0usize; l];
    let mut bits = vec![BIT_CHOICES[0]; l];
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    loop {
        let size = size_of(table, &bits);
        if size <= budget {
            let o = objective_of(table, &bits);
            if best.as_ref().map_or(true, |b| better((o, size, &bits), (b.0, b.1, &b.2))) {
                best = Some((o, size, bits.clone()));
            }
        }
        let mut j = 0;
        while j < l {
            idx[j] += 1;
            if idx[j] < BIT_CHOICES.len() {
                bits[j] = BIT_CHOICES[idx[j]];
                break;
            }
            idx[j] = 0;
            bits[j] = BIT_CHOICES[0];
            j += 1;
        }
        if j == l {
            break;
        }
    }
    Ok(finish(table, budget, best.expect("minimum budget is feasible").2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradMap, Tensor};
    use crate::params::Layer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_table(rng: &mut ChaCha8Rng, l: usize) -> SensitivityTable {
        SensitivityTable {
            objective: "test".into(),
            rows: (0..l)
                .map(|i| {
                    let mut o = rng.gen_range(0.5..10.0);
                    let mut omega = [0.0; 6];
                    for x in omega.iter_mut() {
                        *x = o;
                        o *= rng.gen_range(0.1..0.6);
                    }
                    TableRow {
                        name: format!("l{i}"),
                        elements: 4 * rng.gen_range(1..20u64),
                        omega,
                        fisher_trace: 1.0,
                    }
                })
                .collect(),
        }
    }

    fn random_budget(rng: &mut ChaCha8Rng, t: &SensitivityTable) -> u64 {
        rng.gen_range(t.min_budget()..=t.max_budget())
    }

    #[test]
    fn dp_matches_bruteforce_and_bb() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let l = rng.gen_range(1..=5);
            let t = random_table(&mut rng, l);
            let b = random_budget(&mut rng, &t);
            let dp = allocate(&t, b).unwrap();
            let bf = allocate_bruteforce(&t, b).unwrap();
            let bb = allocate_with(&t, b, &AllocOptions { dp_cap: 0 }).unwrap();
            assert_eq!(dp.bits, bf.bits);
            assert_eq!(bb.bits, bf.bits);
            assert!(dp.size_bits <= b);
        }
    }

    #[test]
    fn extreme_budgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_table(&mut rng, 6);
        assert!(allocate(&t, t.max_budget()).unwrap().bits.iter().all(|(_, b)| *b == 8));
        assert!(allocate(&t, t.min_budget()).unwrap().bits.iter().all(|(_, b)| *b == 3));
        match allocate(&t, t.min_budget() - 1) {
            Err(Error::Infeasible { minimum, .. }) => assert_eq!(minimum, t.min_budget()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_prefer_more_bits_then_earlier_layers() {
        let row = |n: &str| TableRow {
            name: n.into(),
            elements: 10,
            omega: [0.0; 6],
            fisher_trace: 0.0,
        };
        let t = SensitivityTable {
            objective: "t".into(),
            rows: vec![row("a"), row("b")],
        };
        let a = allocate(&t, 110).unwrap();
        assert_eq!(a.bits, vec![("a".into(), 8), ("b".into(), 3)]);
        assert_eq!(allocate_bruteforce(&t, 110).unwrap().bits, a.bits);
        let single = SensitivityTable {
            objective: "t".into(),
            rows: vec![TableRow {
                name: "x".into(),
                elements: 3,
                omega: [5.0, 4.0, 1.0, 2.0, 3.0, 3.0],
                fisher_trace: 0.0,
            }],
        };
        assert_eq!(allocate(&single, 24).unwrap().bits[0].1, 5);
    }

    #[test]
    fn two_parameter_layer_matches_scalar_arithmetic() {
        let p = ParamSet::new(vec![Layer {
            name: "w".into(),
            weight: Tensor::from_vec(&[2], vec![-1.0, 0.5]),
            bias: None,
            exempt: false,
        }])
        .unwrap();
        let f = FisherDiag {
            objective: "overall".into(),
            samples: 1,
            seed: 0,
            diag: GradMap(vec![Tensor::from_vec(&[2], vec![3.0, 2.0])]),
        };
        let t = build_table(&p, &f).unwrap();
        // At 4 bits: delta = [0, 1/14].
        assert!((t.rows[0].omega_at(4) - 2.0 / 196.0).abs() < 1e-15);
        // At 3 bits: scale 1/3, 0.5 -> round(1.5)/3 = 2/3.
        let d: f64 = 2.0 / 3.0 - 0.5;
        assert!((t.rows[0].omega_at(3) - 2.0 * d * d).abs() < 1e-15);
        let zero = FisherDiag {
            diag: GradMap(vec![Tensor::zeros(&[2])]),
            ..f
        };
        assert!(build_table(&p, &zero).unwrap().rows[0].omega.iter().all(|&o| o == 0.0));
    }

    proptest! {
        #[test]
        fn budget_monotone_and_dominates_random(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_table(&mut rng, 6);
            let b1 = random_budget(&mut rng, &t);
            let b2 = rng.gen_range(b1..=t.max_budget());
            let a1 = allocate(&t, b1).unwrap();
            let a2 = allocate(&t, b2).unwrap();
            prop_assert!(a2.objective <= a1.objective);
            prop_assert!((3.0..=8.0).contains(&a1.average_bits));
            for _ in 0..50 {
                let bits: Vec<u32> = (0..6).map(|_| BIT_CHOICES[rng.gen_range(0..6)]).collect();
                if size_of(&t, &bits) <= b1 {
                    prop_assert!(a1.objective <= objective_of(&t, &bits));
                }
            }
        }
    }
}
