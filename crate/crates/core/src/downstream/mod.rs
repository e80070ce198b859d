//! Downstream heads and the evaluation metric suite.

mod metrics;
mod probe;
mod report;

pub use metrics::{
    argmax, attribute_metrics, retrieval_from_scores, retrieval_metrics, segmentation_metrics, top1_accuracy,
    AttributeMetrics, PredictionSet, RetrievalMetrics, SegmentationMetrics, TaskKind,
};
pub use probe::{
    dataset_features, encoder_features, finetune, linear_probe, retrieval_eval, split_indices, ProbeConfig,
    ProbeOutcome, ProbeTask,
};
pub use report::{read_confusion, read_predictions, write_predictions, MetricReport};
