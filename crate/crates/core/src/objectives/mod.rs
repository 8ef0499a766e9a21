//! Critical-category transform, detection losses, distillation and mAP.

mod critical;
mod loss;
mod map;

pub use critical::CriticalSpec;
pub use loss::{
    detections, distill_loss, giou_loss_rows, loss_critical, loss_overall, objective_loss, set_loss,
    LossBreakdown, LossValues, LossWeights, Objective,
};
pub use map::{average_precision, eval_map, iou_thresholds, score_detections, MapReport, Scored};
