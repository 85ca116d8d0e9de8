//! Generator training, AUC/UAUC metrics, warm/cold evaluation and ablations.

mod ablate;
mod metrics;
mod report;
mod train;

pub use ablate::{
    ablate, run_variant, AblationRow, AblationTable, Backbone, InputVariant, SampleSet, SummaryRow, Variant, VariantRun,
    REFERENCE_ROWS, TARGET_ROWS,
};
pub use metrics::{auc, uauc, UaucResult};
pub use report::{evaluate, write_curve_csv, MetricsReport, SplitMetrics};
pub use train::{predict, score_samples, train_cora, EpochStats, TrainConfig, TrainReport};
