//! Distillation objective, SPSA and the alternating training loops.

mod loss;
mod spsa;

pub use loss::{argmax, ce_and_accuracy, cross_entropy, entropy, kd_loss, kl_divergence, soften, KdValue, KdWeights};
pub use spsa::{rademacher, spsa_update, spsa_update_with_delta, SpsaConfig, SpsaStep};
mod train;

pub use train::{
    default_pqkd_config, fit_pipeline, pqkd_train, proxy_loss, read_metrics, sampler_seed, train_teacher,
    validation_proxy, write_metrics, Baseline, Checkpoint, MetricRecord, PqkdConfig, PqkdRun, ProxyBatches,
    TeacherRun, TrainConfig, CHECKPOINT_VERSION, EVAL_CHUNK, METRICS_HEADER,
};
