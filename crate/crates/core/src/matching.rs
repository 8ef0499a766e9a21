//! Minimum-cost bipartite matching between predictions and ground truth.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{DetectionSet, Object};

/// Area floor for degenerate boxes.
pub const AREA_EPS: f64 = 1e-9;
/// Cost of a padded (dummy) column.
pub const PAD_COST: f64 = 1e6;

/// Box corners `(x0, y0, x1, y1)` of a cxcywh box.
pub fn corners(b: &[f64]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection-over-union of two cxcywh boxes.
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |c: &[f64; 4]| ((c[2] - c[0]) * (c[3] - c[1])).max(AREA_EPS);
    inter / (area(&a) + area(&b) - inter)
}

/// Generalised IoU in (-1, 1] of two cxcywh boxes.
pub fn giou(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let area = |c: &[f64; 4]| ((c[2] - c[0]) * (c[3] - c[1])).max(AREA_EPS);
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = area(&ca) + area(&cb) - inter;
    let hull = ((ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]))).max(AREA_EPS);
    inter / union - (hull - union) / hull
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Row-wise softmax of a `[K, C+1]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// `[K, G]` matching cost; rows are predictions, columns ground truth.
pub fn build_cost(preds: &DetectionSet, gts: &[Object], w: &MatchWeights) -> Tensor {
    let k = preds.logits.shape()[0];
    let probs = softmax_rows(&preds.logits);
    let mut out = Vec::with_capacity(k * gts.len());
    for r in 0..k {
        let pb = preds.boxes.row(r);
        for gt in gts {
            let p = probs.at2(r, gt.class - 1);
            let l1: f64 = pb.iter().zip(&gt.bbox).map(|(a, b)| (a - b).abs()).sum();
            out.push(-w.class * p + w.l1 * l1 + w.giou * (1.0 - giou(pb, &gt.bbox)));
        }
    }
    Tensor::from_vec(&[k, gts.len()], out)
}

/// Prediction row assigned to each ground-truth column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub col_to_row: Vec<usize>,
    pub rows: usize,
}

impl Assignment {
    /// Column matched to each row, `None` for the "no object" rows.
    pub fn row_to_col(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.rows];
        for (c, &r) in self.col_to_row.iter().enumerate() {
            out[r] = Some(c);
        }
        out
    }

    pub fn total(&self, cost: &Tensor) -> f64 {
        self.col_to_row
            .iter()
            .enumerate()
            .fold(0.0, |acc, (c, &r)| acc + cost.at2(r, c))
    }
}

/// Exact minimum-cost assignment of every column to a distinct row.
///
/// Columns beyond the given ones are padded with [`PAD_COST`] so the
/// problem is square. Ties resolve toward lower row indices.
pub fn hungarian(cost: &Tensor) -> Assignment {
    let (rows, cols) = (cost.shape()[0], cost.shape()[1]);
    assert!(cols <= rows, "more ground truth than predictions");
    let n = rows;
    let at = |i: usize, j: usize| if j < cols { cost.at2(i, j) } else { PAD_COST };
    // Shortest augmenting paths with potentials, 1-based with a virtual 0.
    // Here the "rows" of the classical formulation are our columns so that
    // each column is inserted once.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(j - 1, i0 - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_to_row = vec![0; cols];
    for j in 1..=n {
        if p[j] >= 1 && p[j] - 1 < cols {
            col_to_row[p[j] - 1] = j - 1;
        }
    }
    Assignment { col_to_row, rows }
}

/// Matches one image's predictions to its ground truth.
pub fn match_image(preds: &DetectionSet, gts: &[Object], w: &MatchWeights) -> Assignment {
    let rows = preds.logits.shape()[0];
    if gts.is_empty() {
        return Assignment {
            col_to_row: Vec::new(),
            rows,
        };
    }
    hungarian(&build_cost(preds, gts, w))
}
