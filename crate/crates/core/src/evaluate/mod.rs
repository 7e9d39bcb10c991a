//! Frozen-encoder probing, task metrics, the loss/modality ablation matrix,
//! finite-difference gradient checks and the multipool transfer protocol.

mod ablation;
mod finetune;
mod gradcheck;
mod metrics;
mod probe;

pub use ablation::{
    ablation_matrix, cell_dir_name, mean_std, render_table, run_cell, summarize, AblationBase, AblationRow,
    CellSummary, ModalityData,
};
pub use finetune::{frozen_stages_checksum, multipool_features, multipool_finetune, FinetuneConfig, FinetuneOutcome};
pub use gradcheck::{
    gradcheck_suite, relative_error, GradcheckReport, StopGradientCheck, TermCheck, MAP_CHANNELS, MAP_SIDE,
    REL_ERROR_FLOOR,
};
pub use metrics::{
    audit_metrics, classification_metrics, compute_metrics, regression_metrics, label_rank, output_width, TaskMetrics,
};
pub use probe::{
    linear_probe, linear_probe_checkpoint, probe_features, FrozenEncoder, HeadKind, MetricsReport, ProbeConfig,
    ProbeData, ProbeFit, ProbeOptimizer, SplitData,
};

#[cfg(test)]
mod tests;
