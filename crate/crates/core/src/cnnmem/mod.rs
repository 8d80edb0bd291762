//! Signal-plus-noise data, a two-layer ReLU CNN, per-sample Hessians, and
//! the memorization versus forgetting experiments built on them.

mod data;
mod experiments;
mod hessian;
mod model;

pub use data::{draw_sample, generate_dataset, DatasetParams, Sample, SignalNoiseDataset};
pub use experiments::{
    coherence_curve_csv, coherence_ratio_curve, heatmap_csv, snr_heatmap, spearman, unlearn_cnn, CoherenceCurvePoint,
    CoherenceCurveSpec, HeatmapCell, HeatmapSpec, Sampling, UnlearnOptions, UnlearnTrace, COHERENCE_CSV_HEADER,
    HEATMAP_CSV_HEADER,
};
pub use hessian::{sample_hessian, SampleHessianFactor};
pub use model::{
    logistic_loss, loss_and_grad, sample_loss_and_grad, test_error, train_full_batch, CnnModel, TrainOptions,
    TrainResult, LOSS_TARGET,
};
