//! Viewport prediction: the multi-head encoder–decoder, its training loop
//! and simpler baselines behind a common trait.

mod model;
mod predictor;
mod train;

pub use model::{
    attention, count_params_flops, ensemble, mtio_loss, multi_head_attention, positional_encoding, AttentionParams,
    DecodeHook, ModelCost, MtioTransformer, PredictionSet, PredictorConfig, VpBatch,
};
pub use predictor::{LastValue, LinearExtrapolation, TransformerPredictor, ViewportPredictor};
pub use train::{
    evaluate_accuracy, train, train_from, train_step, validation_loss, AccuracyReport, EpochLog, TrainOptions,
    TrainOutcome, Window, WindowedDataset,
};
