//! Experiment configuration, training phases, studies and their artifacts.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod studies;
pub mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{
    AnalysisConfig, BaselinePolicy, CorporaConfig, ExperimentConfig, FinetuneConfig, MergeEntry, PhaseConfig,
};
pub use report::{
    heatmap, line_chart, metrics_csv, read_metrics, write_atomic, MetricsLog, MetricsRow, Series, CSV_HEADER,
};
pub use studies::{
    divergence_study, ladder_study, layer_study, plot_metrics, read_similarity_csv, write_plots, CkaBatch,
    DivergencePoint, LadderEntry, LadderResult, LayerStudy,
};
pub use train::{
    finetune, finetune_baseline, merge_and_train, pretrain, train, Artifacts, TrainSettings, Trajectory, Workspace,
};
