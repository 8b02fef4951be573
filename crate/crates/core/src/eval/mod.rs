//! Grounding, highlight, captioning-localisation and grounded-QA metrics,
//! the prediction-bias diagnostic and report files.

mod diagnostic;
mod metrics;
mod report;
mod runner;

pub use diagnostic::{
    bias_diagnostic, changed, grounding_queries, perturb, prediction_histogram, BiasReport, ConstantGrounder,
    GroundQuery, Grounder, ModelGrounder, OracleGrounder, Perturbation, PerturbationStats, HIST_BINS,
    SAME_PREDICTION_IOU,
};
pub use metrics::{
    average_precision, gqa_metrics, gqa_overlap, hd_metrics, map_at_iou, map_summary, map_sweep, recall_at_iou,
    GqaMetrics, GqaSample, HdMetrics, MapSummary, RecallAtIou, RECALL_THRESHOLDS, VERY_GOOD,
};
pub use report::{read_report, write_report, EvalReport, SampleRecord, SCHEMA_VERSION};
pub use runner::{derived_clip_labels, evaluate, EvalOptions, EvalTask, MOMENT_LIST};
pub use crate::segment::{giou_1d, iop_1d, iou_1d};
