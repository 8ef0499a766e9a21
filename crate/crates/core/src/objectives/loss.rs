use serde::{Deserialize, Serialize};

use super::critical::CriticalSpec;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::matching::{match_image, Assignment, MatchWeights, AREA_EPS};
use crate::model::{DetectionSet, Object};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of "no object" targets.
    pub no_object: f64,
    pub matcher: MatchWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
            matcher: MatchWeights::default(),
        }
    }
}

/// Loss terms as graph nodes; `total` is the weighted sum of the others.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub class: Var,
    pub l1: Var,
    pub giou: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.item(self.total),
            class: g.item(self.class),
            l1: g.item(self.l1),
            giou: g.item(self.giou),
        }
    }
}

/// Which scalar a per-sample gradient is taken of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// L_A, the loss on the original classes.
    Overall,
    /// L_F, the loss on the transformed classes.
    Critical { spec: CriticalSpec },
    /// alpha * L_A + L_F.
    Combined { spec: CriticalSpec, alpha: f64 },
}

impl Objective {
    pub fn tag(&self) -> String {
        match self {
            Objective::Overall => "overall".into(),
            Objective::Critical { spec } => format!("critical({})", spec_label(spec)),
            Objective::Combined { spec, alpha } => format!("combined({}, alpha={alpha})", spec_label(spec)),
        }
    }
}

fn spec_label(spec: &CriticalSpec) -> String {
    spec.name.clone().unwrap_or_else(|| format!("{:?}", spec.critical))
}

/// Current values of a graph's detection outputs.
pub fn detections(g: &Graph, logits: Var, boxes: Var) -> DetectionSet {
    DetectionSet {
        logits: g.value(logits).clone(),
        boxes: g.value(boxes).clone(),
    }
}

fn box_part(g: &mut Graph, b: Var, i: usize) -> Result<Var> {
    g.narrow(b, 1, i, 1)
}

/// Per-row `1 - GIoU` of two `[n, 4]` cxcywh nodes, shape `[n, 1]`.
pub fn giou_loss_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let c = |g: &mut Graph, x: Var| -> Result<[Var; 4]> {
        let cx = box_part(g, x, 0)?;
        let cy = box_part(g, x, 1)?;
        let w = box_part(g, x, 2)?;
        let h = box_part(g, x, 3)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let ca = c(g, a)?;
    let cb = c(g, b)?;
    let area = |g: &mut Graph, k: &[Var; 4]| -> Result<Var> {
        let w = g.sub(k[2], k[0])?;
        let h = g.sub(k[3], k[1])?;
        let ar = g.mul(w, h)?;
        let eps = g.full_like(ar, AREA_EPS);
        g.maximum(ar, eps)
    };
    let aa = area(g, &ca)?;
    let ab = area(g, &cb)?;
    let ix1 = g.minimum(ca[2], cb[2])?;
    let ix0 = g.maximum(ca[0], cb[0])?;
    let iy1 = g.minimum(ca[3], cb[3])?;
    let iy0 = g.maximum(ca[1], cb[1])?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let sum = g.add(aa, ab)?;
    let union = g.sub(sum, inter)?;
    let hx1 = g.maximum(ca[2], cb[2])?;
    let hx0 = g.minimum(ca[0], cb[0])?;
    let hy1 = g.maximum(ca[3], cb[3])?;
    let hy0 = g.minimum(ca[1], cb[1])?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;
    let eps = g.full_like(hull, AREA_EPS);
    let hull = g.maximum(hull, eps)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    let one_minus = g.neg(giou);
    Ok(g.add_scalar(one_minus, 1.0))
}

/// Set loss for a fixed assignment.
///
/// With `spec`, logits and labels are transformed before the
/// classification term; the box terms do not depend on `spec`.
pub fn set_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[Object],
    assignment: &Assignment,
    spec: Option<&CriticalSpec>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let k = g.shape(logits)[0];
    let c1 = g.shape(logits)[1];
    let (logits, cols, label): (Var, usize, Box<dyn Fn(usize) -> usize>) = match spec {
        Some(s) => {
            let t = s.transform_graph(g, logits)?;
            (t, s.columns(), Box::new(move |c| s.relabel(c)))
        }
        None => (logits, c1, Box::new(|c| c - 1)),
    };
    let row_to_col = assignment.row_to_col();
    let mut target = vec![0.0; k * cols];
    let mut wsum = 0.0;
    for (r, col) in row_to_col.iter().enumerate() {
        let (t, wt) = match col {
            Some(j) => (label(gts[*j].class), 1.0),
            None => (cols - 1, w.no_object),
        };
        target[r * cols + t] = wt;
        wsum += wt;
    }
    let logp = g.log_softmax(logits, 1)?;
    let tw = g.constant(Tensor::from_vec(&[k, cols], target));
    let ce = g.inner(logp, tw)?;
    let class = g.scale(ce, -1.0 / wsum);

    let (l1, giou) = if gts.is_empty() {
        (g.scalar(0.0), g.scalar(0.0))
    } else {
        let n = gts.len() as f64;
        let pb = g.index_select(boxes, 0, &assignment.col_to_row)?;
        let tb: Vec<f64> = gts.iter().flat_map(|o| o.bbox).collect();
        let tb = g.constant(Tensor::from_vec(&[gts.len(), 4], tb));
        let d = g.sub(pb, tb)?;
        let d = g.abs(d);
        let l1 = g.sum(d);
        let l1 = g.scale(l1, 1.0 / n);
        let gl = giou_loss_rows(g, pb, tb)?;
        let gl = g.sum(gl);
        (l1, g.scale(gl, 1.0 / n))
    };
    let a = g.scale(class, w.class);
    let b = g.scale(l1, w.l1);
    let c = g.scale(giou, w.giou);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossBreakdown { total, class, l1, giou })
}

fn assignment_of(g: &Graph, logits: Var, boxes: Var, gts: &[Object], w: &LossWeights) -> Assignment {
    match_image(&detections(g, logits, boxes), gts, &w.matcher)
}

/// L_A: matched loss on the original classes.
pub fn loss_overall(g: &mut Graph, logits: Var, boxes: Var, gts: &[Object], w: &LossWeights) -> Result<LossBreakdown> {
    let a = assignment_of(g, logits, boxes, gts, w);
    set_loss(g, logits, boxes, gts, &a, None, w)
}

/// L_F: matched loss on transformed classes, matching done in the original space.
pub fn loss_critical(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[Object],
    spec: &CriticalSpec,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let a = assignment_of(g, logits, boxes, gts, w);
    set_loss(g, logits, boxes, gts, &a, Some(spec), w)
}

/// Scalar node for `objective` on one image; one matching is shared by both
/// terms of the combined objective.
pub fn objective_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[Object],
    objective: &Objective,
    w: &LossWeights,
) -> Result<Var> {
    let a = assignment_of(g, logits, boxes, gts, w);
    match objective {
        Objective::Overall => Ok(set_loss(g, logits, boxes, gts, &a, None, w)?.total),
        Objective::Critical { spec } => Ok(set_loss(g, logits, boxes, gts, &a, Some(spec), w)?.total),
        Objective::Combined { spec, alpha } => {
            let la = set_loss(g, logits, boxes, gts, &a, None, w)?.total;
            let lf = set_loss(g, logits, boxes, gts, &a, Some(spec), w)?.total;
            let la = g.scale(la, *alpha);
            g.add(la, lf)
        }
    }
}

/// KL(teacher ‖ student) over class distributions averaged over queries,
/// plus the per-query L1 box distance averaged over queries. Queries are
/// paired by index.
pub fn distill_loss(
    g: &mut Graph,
    student_logits: Var,
    student_boxes: Var,
    teacher: &DetectionSet,
    temperature: f64,
) -> Result<Var> {
    let k = g.shape(student_logits)[0] as f64;
    let tl = g.constant(teacher.logits.scale(1.0 / temperature));
    let lt = g.log_softmax(tl, 1)?;
    let pt = g.exp(lt);
    let sl = g.scale(student_logits, 1.0 / temperature);
    let ls = g.log_softmax(sl, 1)?;
    let diff = g.sub(lt, ls)?;
    let kl = g.inner(pt, diff)?;
    let kl = g.scale(kl, 1.0 / k);
    let tb = g.constant(teacher.boxes.clone());
    let d = g.sub(student_boxes, tb)?;
    let d = g.abs(d);
    let l1 = g.sum(d);
    let l1 = g.scale(l1, 1.0 / k);
    g.add(kl, l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::giou;

    fn gts() -> Vec<Object> {
        vec![
            Object {
                class: 1,
                bbox: [0.25, 0.25, 0.3, 0.2],
            },
            Object {
                class: 4,
                bbox: [0.7, 0.7, 0.2, 0.3],
            },
        ]
    }

    /// Three queries: two match the objects, one predicts "no object".
    fn logits_for(classes: [usize; 3], c: usize, margin: f64) -> Tensor {
        let mut v = vec![0.0; 3 * (c + 1)];
        for (r, &cl) in classes.iter().enumerate() {
            v[r * (c + 1) + cl - 1] = margin;
        }
        Tensor::from_vec(&[3, c + 1], v)
    }

    fn exact_boxes() -> Tensor {
        Tensor::from_vec(
            &[3, 4],
            vec![0.25, 0.25, 0.3, 0.2, 0.7, 0.7, 0.2, 0.3, 0.5, 0.5, 0.1, 0.1],
        )
    }

    fn eval(
        logits: &Tensor,
        boxes: &Tensor,
        f: impl Fn(&mut Graph, Var, Var) -> Result<LossBreakdown>,
    ) -> LossValues {
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let b = g.param(boxes.clone());
        f(&mut g, l, b).unwrap().values(&g)
    }

    #[test]
    fn perfect_prediction_has_vanishing_loss() {
        let w = LossWeights::default();
        let v = eval(&logits_for([1, 4, 6], 5, 200.0), &exact_boxes(), |g, l, b| {
            loss_overall(g, l, b, &gts(), &w)
        });
        assert!(v.class < 1e-12 && v.l1 < 1e-12 && v.giou < 1e-12, "{v:?}");
    }

    #[test]
    fn identity_spec_is_bitwise_overall() {
        let w = LossWeights::default();
        let spec = CriticalSpec::identity(5);
        let logits = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = eval(&logits, &exact_boxes(), |g, l, b| loss_overall(g, l, b, &gts(), &w));
        let b = eval(&logits, &exact_boxes(), |g, l, b| loss_critical(g, l, b, &gts(), &spec, &w));
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn non_critical_swap_changes_only_overall() {
        let w = LossWeights::default();
        let spec = CriticalSpec::new(vec![1, 2], 5).unwrap();
        // Class 4 object predicted as class 3: both non-critical.
        let right = logits_for([1, 4, 6], 5, 3.0);
        let wrong = logits_for([1, 3, 6], 5, 3.0);
        let f_a = |l: &Tensor| eval(l, &exact_boxes(), |g, l, b| loss_overall(g, l, b, &gts(), &w));
        let f_f = |l: &Tensor| eval(l, &exact_boxes(), |g, l, b| loss_critical(g, l, b, &gts(), &spec, &w));
        assert!(f_a(&wrong).total > f_a(&right).total);
        assert_eq!(f_f(&wrong).total.to_bits(), f_f(&right).total.to_bits());
    }

    #[test]
    fn zero_objects_is_all_no_object() {
        let w = LossWeights::default();
        let v = eval(&logits_for([6, 6, 6], 5, 50.0), &exact_boxes(), |g, l, b| {
            loss_overall(g, l, b, &[], &w)
        });
        assert_eq!(v.l1, 0.0);
        assert_eq!(v.giou, 0.0);
        assert!(v.class < 1e-12);
    }

    #[test]
    fn graph_giou_matches_scalar_giou() {
        let a = Tensor::from_vec(&[2, 4], vec![0.3, 0.4, 0.2, 0.3, 0.5, 0.5, 0.4, 0.4]);
        let b = Tensor::from_vec(&[2, 4], vec![0.35, 0.45, 0.25, 0.2, 0.1, 0.1, 0.1, 0.1]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let r = giou_loss_rows(&mut g, va, vb).unwrap();
        for i in 0..2 {
            assert!((g.value(r).data()[i] - (1.0 - giou(a.row(i), b.row(i)))).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let logits = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f64).cos()).collect());
        let boxes = Tensor::from_vec(&[3, 4], (0..12).map(|i| 0.2 + 0.05 * i as f64).collect());
        let v = eval(&logits, &boxes, |g, l, b| loss_overall(g, l, b, &gts(), &w));
        let expect = w.class * v.class + w.l1 * v.l1 + w.giou * v.giou;
        assert!((v.total - expect).abs() < 1e-12);
    }

    fn distill(student: &DetectionSet, teacher: &DetectionSet) -> f64 {
        let mut g = Graph::new();
        let l = g.constant(student.logits.clone());
        let b = g.constant(student.boxes.clone());
        let d = distill_loss(&mut g, l, b, teacher, 1.0).unwrap();
        g.item(d)
    }

    #[test]
    fn distillation_properties() {
        let a = DetectionSet {
            logits: Tensor::from_vec(&[2, 3], vec![2.0, 0.0, -1.0, 0.0, 1.0, 0.5]),
            boxes: Tensor::from_vec(&[2, 4], vec![0.2, 0.2, 0.1, 0.1, 0.8, 0.8, 0.2, 0.2]),
        };
        assert_eq!(distill(&a, &a), 0.0);
        let swapped = DetectionSet {
            logits: Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.5, 2.0, 0.0, -1.0]),
            boxes: Tensor::from_vec(&[2, 4], vec![0.8, 0.8, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1]),
        };
        assert!(distill(&swapped, &a) > 0.1);
        // KL alone (equal boxes) is non-negative.
        let other = DetectionSet {
            logits: Tensor::from_vec(&[2, 3], vec![-1.0, 3.0, 0.0, 0.3, 0.3, 0.3]),
            boxes: a.boxes.clone(),
        };
        assert!(distill(&other, &a) >= 0.0);
    }
}
