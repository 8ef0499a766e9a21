use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// M critical classes out of C; every other class folds into "others".
///
/// Transformed columns (0-based): critical classes `0..M` in list order,
/// "others" at `M`, "no object" at `M + 1`. When M = C the transform is the
/// identity and there is no "others" column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub critical: Vec<usize>,
    pub num_classes: usize,
}

impl CriticalSpec {
    pub fn new(critical: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = CriticalSpec {
            name: None,
            critical,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Identity spec with every class critical.
    pub fn identity(num_classes: usize) -> Self {
        CriticalSpec {
            name: None,
            critical: (1..=num_classes).collect(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.critical.len();
        if m == 0 || m > self.num_classes {
            return Err(Error::config(format!(
                "critical set size {m} must lie in 1..={}",
                self.num_classes
            )));
        }
        let mut seen = vec![false; self.num_classes + 1];
        for &c in &self.critical {
            if c == 0 || c > self.num_classes || seen[c] {
                return Err(Error::config(format!(
                    "critical classes must be distinct ids in 1..={}",
                    self.num_classes
                )));
            }
            seen[c] = true;
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.critical.len()
    }

    pub fn is_identity(&self) -> bool {
        self.m() == self.num_classes
    }

    /// Number of transformed real classes (critical plus "others" if any).
    pub fn real_classes(&self) -> usize {
        if self.is_identity() {
            self.num_classes
        } else {
            self.m() + 1
        }
    }

    /// Transformed column count including "no object".
    pub fn columns(&self) -> usize {
        self.real_classes() + 1
    }

    /// Non-critical class ids in increasing order.
    pub fn others(&self) -> Vec<usize> {
        (1..=self.num_classes)
            .filter(|c| !self.critical.contains(c))
            .collect()
    }

    /// 0-based transformed column of a 1-based original class; `C + 1` is
    /// "no object".
    pub fn relabel(&self, class: usize) -> usize {
        if class == self.num_classes + 1 {
            return self.columns() - 1;
        }
        if self.is_identity() {
            return class - 1;
        }
        match self.critical.iter().position(|&c| c == class) {
            Some(i) => i,
            None => self.m(),
        }
    }

    /// Transforms a `[K, C+1]` logit node; the identity spec returns `logits`.
    pub fn transform_graph(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        if self.is_identity() {
            return Ok(logits);
        }
        let crit: Vec<usize> = self.critical.iter().map(|c| c - 1).collect();
        let others: Vec<usize> = self.others().iter().map(|c| c - 1).collect();
        let a = g.index_select(logits, 1, &crit)?;
        let o = g.index_select(logits, 1, &others)?;
        let o = g.max_axis(o, 1)?;
        let none = g.narrow(logits, 1, self.num_classes, 1)?;
        g.concat(&[a, o, none], 1)
    }

    /// Transforms a `[K, C+1]` matrix of logits or probabilities.
    pub fn transform(&self, logits: &Tensor) -> Tensor {
        if self.is_identity() {
            return logits.clone();
        }
        let k = logits.shape()[0];
        let others = self.others();
        let mut out = Vec::with_capacity(k * self.columns());
        for r in 0..k {
            let row = logits.row(r);
            out.extend(self.critical.iter().map(|&c| row[c - 1]));
            out.push(
                others
                    .iter()
                    .map(|&c| row[c - 1])
                    .fold(f64::NEG_INFINITY, f64::max),
            );
            out.push(row[self.num_classes]);
        }
        Tensor::from_vec(&[k, self.columns()], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn five_class_example() {
        let s = CriticalSpec::new(vec![1, 2], 5).unwrap();
        let row = Tensor::from_vec(&[1, 6], vec![0.1, 0.2, 0.7, -0.3, 0.5, 0.9]);
        assert_eq!(s.transform(&row).data(), &[0.1, 0.2, 0.7, 0.9]);
    }

    #[test]
    fn single_other_column_is_copied() {
        let s = CriticalSpec::new(vec![4, 2, 3, 1], 4).unwrap();
        assert!(s.is_identity());
        let s = CriticalSpec::new(vec![1, 2, 4], 5).unwrap();
        let row = Tensor::from_vec(&[1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // Others are {3, 5}.
        assert_eq!(s.transform(&row).data(), &[1.0, 2.0, 4.0, 5.0, 6.0]);
        let s = CriticalSpec::new(vec![1, 2, 3, 4], 5).unwrap();
        assert_eq!(s.transform(&row).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn argmax_after_transform_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = CriticalSpec::new(vec![2, 5, 7], 8).unwrap();
        for _ in 0..10_000 {
            let row: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = s.transform(&Tensor::from_vec(&[1, 9], row.clone()));
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0
            };
            let orig = argmax(&row) + 1;
            let expect = if orig == 9 {
                4
            } else if let Some(i) = [2, 5, 7].iter().position(|&c| c == orig) {
                i
            } else {
                3
            };
            assert_eq!(argmax(t.data()), expect);
        }
    }

    #[test]
    fn graph_transform_matches_tensor_transform() {
        let s = CriticalSpec::new(vec![3, 1], 4).unwrap();
        let x = Tensor::from_vec(&[2, 5], vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0, 4.0, -2.0, 3.0, 0.1]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let t = s.transform_graph(&mut g, v).unwrap();
        assert_eq!(g.value(t), &s.transform(&x));
        assert_eq!(s.relabel(3), 0);
        assert_eq!(s.relabel(1), 1);
        assert_eq!(s.relabel(4), 2);
        assert_eq!(s.relabel(5), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CriticalSpec::new(vec![], 4).is_err());
        assert!(CriticalSpec::new(vec![1, 1], 4).is_err());
        assert!(CriticalSpec::new(vec![5], 4).is_err());
    }
}
