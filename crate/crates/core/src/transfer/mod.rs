//! Training regimes: pretraining, transfer learning on a new cohort alone,
//! and transfer learning on the new cohort mixed with the original one.

mod experiment;
mod report;
mod split;
mod train;

pub use experiment::{
    load_experiment_spec, pretrain_from_spec, run_experiment, transfer_from_spec, CohortSource, ExperimentKind, ExperimentOutput,
    ExperimentSpec, PanelComparisons,
};
pub use report::{
    render_markdown, write_experiment_outputs, write_panel_csvs, EvalCohort, ExperimentReport,
    FoldMean, LogRow, StatRow, SubjectResult, SummaryRow, VolumeRow, VolumeSummary,
};
pub use split::{split_cohort, split_ids, SplitAssignment, SplitFractions};
pub use train::{
    derive_seed, evaluate_model, pretrain, segment_volume, transfer_learn, CohortSubject,
    MixMode, Regime, TileSegmenter, TrainConfig, TrainedModel,
};
