//! Matching costs, rectangular Hungarian assignment, GIoU and the
//! set-prediction loss.

mod boxes;
mod hungarian;
mod loss;

pub use boxes::{giou, iou, Annotation, AnnotationSet, BBox};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{
    build_cost_matrix, focal_cost, match_predictions, set_loss, HeadOutput, LossBreakdown,
    LossWeights,
};
