//! The full network, its training loop, evaluation, and the fusion ablation.

mod ablation;
mod eval;
mod net;
mod train;

pub use ablation::{ablate, ablation_csv, run_experiment, summarize, AblationRow, ExperimentRun, FamilySummary};
pub use eval::{
    attention_map_csv, attention_map_pgm, eval_threads, evaluate, predict, score_item, MetricsReport, Prediction,
    THREADS_ENV,
};
pub use net::{ForwardOutput, Modality, ModelConfig, VisTaNet};
pub use train::{
    argmax_rows, assemble_batch, epoch_batches, item_windows, train, PairRef, PairedBatch, TrainConfig, TrainOutcome,
};
