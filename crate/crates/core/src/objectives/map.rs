use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::critical::CriticalSpec;
use crate::model::io::FORMAT_VERSION;
use crate::matching::{iou, softmax_rows};
use crate::model::{DetectionSet, Object};

/// COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One scored box: the query's best real class and its probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Per-class AP averaged over thresholds, and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub format_version: u32,
    /// Class label (1-based, in transformed space when a spec is given) to AP.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// AP at IoU 0.5 per class.
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub map: f64,
    /// Mean over the critical classes only; equals `map` without a spec.
    pub map_critical_only: f64,
    pub iou_thresholds: Vec<f64>,
    pub spec: Option<CriticalSpec>,
}

/// Scores every query by its most likely real class.
pub fn score_detections(preds: &[DetectionSet], spec: Option<&CriticalSpec>) -> Vec<Scored> {
    let mut out = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let probs = softmax_rows(&p.logits);
        let probs = match spec {
            Some(s) => s.transform(&probs),
            None => probs,
        };
        let real = probs.shape()[1] - 1;
        for k in 0..probs.shape()[0] {
            let row = &probs.row(k)[..real];
            let (c, s) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            let b = p.boxes.row(k);
            out.push(Scored {
                image: i,
                class: c + 1,
                score: s,
                bbox: [b[0], b[1], b[2], b[3]],
            });
        }
    }
    out
}

/// Area under the all-point interpolated precision-recall curve.
///
/// `hits` lists detections in decreasing score order, `true` for a true
/// positive; `n_gt` is the number of ground-truth objects.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// True-positive flags of one class's detections at one threshold.
fn greedy_hits(dets: &[&Scored], gts: &[Vec<[f64; 4]>], thr: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = thr;
            for (j, gb) in gts[d.image].iter().enumerate() {
                if used[d.image][j] {
                    continue;
                }
                let v = iou(&d.bbox, gb);
                if v >= best_iou {
                    // Strict improvement keeps the earliest of equal overlaps.
                    if best.is_none() || v > best_iou {
                        best_iou = v;
                        best = Some(j);
                    }
                }
            }
            match best {
                Some(j) => {
                    used[d.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// mAP over IoU thresholds 0.50:0.95. With `spec`, detections and labels
/// are mapped to the transformed classes first.
pub fn eval_map(preds: &[DetectionSet], gts: &[Vec<Object>], spec: Option<&CriticalSpec>) -> MapReport {
    let scored = score_detections(preds, spec);
    let n_classes = spec.map_or_else(|| preds.first().map_or(0, |p| p.logits.shape()[1] - 1), |s| s.real_classes());
    let label = |c: usize| spec.map_or(c, |s| s.relabel(c) + 1);
    let thresholds = iou_thresholds();
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_ap50 = BTreeMap::new();
    for c in 1..=n_classes {
        let class_gts: Vec<Vec<[f64; 4]>> = gts
            .iter()
            .map(|objs| objs.iter().filter(|o| label(o.class) == c).map(|o| o.bbox).collect())
            .collect();
        let n_gt: usize = class_gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let mut dets: Vec<&Scored> = scored.iter().filter(|d| d.class == c).collect();
        // Stable: equal scores keep (image, query) order.
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut sum = 0.0;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let ap = average_precision(&greedy_hits(&dets, &class_gts, thr), n_gt);
            if ti == 0 {
                per_class_ap50.insert(c, ap);
            }
            sum += ap;
        }
        per_class_ap.insert(c, sum / thresholds.len() as f64);
    }
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let map = mean(per_class_ap.values().copied().collect());
    let map_critical_only = match spec {
        Some(s) if !s.is_identity() => mean(
            per_class_ap
                .iter()
                .filter(|(&c, _)| c <= s.m())
                .map(|(_, &v)| v)
                .collect(),
        ),
        _ => map,
    };
    MapReport {
        format_version: FORMAT_VERSION,
        per_class_ap,
        per_class_ap50,
        map,
        map_critical_only,
        iou_thresholds: thresholds,
        spec: spec.cloned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    /// A query confidently predicting `class` (1-based) of `c` classes.
    fn det(rows: &[(usize, f64, [f64; 4])], c: usize) -> DetectionSet {
        let mut logits = Vec::new();
        let mut boxes = Vec::new();
        for &(class, logit, b) in rows {
            let mut row = vec![0.0; c + 1];
            row[class - 1] = logit;
            logits.extend(row);
            boxes.extend(b);
        }
        DetectionSet {
            logits: Tensor::from_vec(&[rows.len(), c + 1], logits),
            boxes: Tensor::from_vec(&[rows.len(), 4], boxes),
        }
    }

    const B: [f64; 4] = [0.5, 0.5, 0.2, 0.2];

    #[test]
    fn exact_detection_has_unit_ap() {
        let preds = vec![det(&[(1, 50.0, B)], 2)];
        let gts = vec![vec![Object { class: 1, bbox: B }]];
        let r = eval_map(&preds, &gts, None);
        assert_eq!(r.per_class_ap[&1], 1.0);
        assert_eq!(r.map, 1.0);
        assert!(!r.per_class_ap.contains_key(&2));
    }

    #[test]
    fn true_positive_ranked_first_gives_unit_ap() {
        let far = [0.1, 0.1, 0.05, 0.05];
        let preds = vec![det(&[(1, 5.0, B), (1, 4.0, far)], 2)];
        let gts = vec![vec![Object { class: 1, bbox: B }]];
        assert_eq!(eval_map(&preds, &gts, None).map, 1.0);
        // Hand PR curve with the FP first: P = [0, 1/2], R = [0, 1] -> AP 1/2.
        assert_eq!(average_precision(&[false, true], 1), 0.5);
    }

    /// Independent oracle: sweep the distinct recall levels, taking the best
    /// precision at or beyond each.
    fn oracle_ap(hits: &[bool], n_gt: usize) -> f64 {
        let mut pts = Vec::new();
        let mut tp = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            if h {
                tp += 1.0;
            }
            pts.push((tp / n_gt as f64, tp / (i + 1) as f64));
        }
        let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    #[test]
    fn three_image_fixture_matches_oracle() {
        let b1 = [0.3, 0.3, 0.2, 0.2];
        let b2 = [0.7, 0.7, 0.2, 0.2];
        let near = [0.31, 0.3, 0.2, 0.2];
        let gts = vec![
            vec![Object { class: 1, bbox: b1 }, Object { class: 1, bbox: b2 }],
            vec![Object { class: 1, bbox: b1 }],
            vec![Object { class: 1, bbox: b2 }, Object { class: 1, bbox: b1 }],
        ];
        let preds = vec![
            det(&[(1, 3.0, b1), (1, 1.0, [0.1, 0.9, 0.1, 0.1])], 1),
            det(&[(1, 2.5, near), (1, 0.5, b2)], 1),
            det(&[(1, 2.0, b2), (1, 1.5, [0.5, 0.5, 0.1, 0.1])], 1),
        ];
        let r = eval_map(&preds, &gts, None);
        // Scores in order: 3.0 TP, 2.5 TP (IoU ~0.905), 2.0 TP, 1.5 FP, 1.0 FP, 0.5 FP.
        let scored = score_detections(&preds, None);
        let mut order: Vec<&Scored> = scored.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let gtb: Vec<Vec<[f64; 4]>> = gts.iter().map(|v| v.iter().map(|o| o.bbox).collect()).collect();
        let mut total = 0.0;
        for &thr in &iou_thresholds() {
            let hits = greedy_hits(&order, &gtb, thr);
            total += oracle_ap(&hits, 5);
        }
        assert!((r.map - total / 10.0).abs() < 1e-9);
        assert!(r.map > 0.0 && r.map <= 1.0);
    }

    #[test]
    fn image_order_does_not_matter() {
        let gts = vec![
            vec![Object { class: 1, bbox: B }],
            vec![Object { class: 2, bbox: [0.3, 0.3, 0.1, 0.2] }],
        ];
        let preds = vec![
            det(&[(1, 3.0, B), (2, 2.0, B)], 2),
            det(&[(2, 1.0, [0.31, 0.3, 0.1, 0.2]), (1, 0.7, B)], 2),
        ];
        let a = eval_map(&preds, &gts, None);
        let rev_p: Vec<_> = preds.iter().rev().cloned().collect();
        let rev_g: Vec<_> = gts.iter().rev().cloned().collect();
        assert!((a.map - eval_map(&rev_p, &rev_g, None).map).abs() < 1e-15);
    }

    #[test]
    fn critical_map_uses_transformed_classes() {
        let spec = CriticalSpec::new(vec![1], 3).unwrap();
        // Class 3 predicted as class 2: wrong overall, right as "others".
        let preds = vec![det(&[(2, 9.0, B)], 3)];
        let gts = vec![vec![Object { class: 3, bbox: B }]];
        assert_eq!(eval_map(&preds, &gts, None).map, 0.0);
        let r = eval_map(&preds, &gts, Some(&spec));
        assert_eq!(r.per_class_ap[&2], 1.0);
        assert_eq!(r.map, 1.0);
    }
}
