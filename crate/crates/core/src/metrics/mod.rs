//! Segmentation evaluation: assignment, ARI, foreground ARI, mIoU, and
//! multi-seed aggregation.

mod bleeding;
mod hungarian;
mod partition;
mod report;

pub use bleeding::{constructed_bleeding_case, BleedingReport};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use partition::{ari, fg_ari, iou_matrix, miou, Segmentation};
pub use report::{
    aggregate_seeds, evaluate_samples, MetricReport, MetricSummary, SampleMetrics, SeedMetrics,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cost at ({row}, {col}) is not finite: {value}")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("ground truth has no foreground pixels")]
    NoForeground,
    #[error("nothing to aggregate")]
    Empty,
}
