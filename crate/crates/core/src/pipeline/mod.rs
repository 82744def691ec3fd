//! End-to-end experiment stages: pretraining, upstream and downstream
//! fine-tuning, evaluation and grid execution.

mod grid;
mod train;

pub use grid::{
    avg_downstream_language, avg_subnetwork_performance, full_grid, required_upstreams, run_grid,
    run_grid_with, sort_results, train_upstreams, ExperimentSpec, GridInputs, MaskSource,
    MatchedCells, RunResult, UpstreamModels,
};
pub use train::{
    derive_subnetwork, downstream_finetune, downstream_schedule, evaluate, masked_rows,
    mean_ctc_loss, pretrain_base, select_best_epoch, train_ctc, upstream_finetune,
    DownstreamResult, EpochLog, PretrainConfig, PretrainResult, StepInfo, StepObserver,
    TrainConfig, Trainable, UpstreamResult, DOWNSTREAM_EPOCHS,
};
