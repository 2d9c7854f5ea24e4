//! Optimization loops, learning-rate schedule, metrics and long-clip tracking.

mod loops;
mod metrics;
mod schedule;
mod tracking;

pub use loops::{
    evaluate, finetune, finetune_over_seeds, identity_baseline_me, mask_ratio_sweep, pretrain, EpochRecord, Evaluation,
    FinetuneOutcome, MetricReport, PretrainOutcome, SamplePrediction, Task, TrainConfig,
    MASK_RATIO_GRID,
};
pub use metrics::{accuracy, me, me_coords, mean_abs_error, rmse, weighted_f1, SeedSummary};
pub use schedule::{effective_lr, Schedule};
pub use tracking::{predict_track, track_long};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "VIACT_THREADS";

/// Size the global worker pool from `VIACT_THREADS` if set. Results do not
/// depend on the thread count: per-sample work is reduced in sample order.
pub fn configure_threads_from_env() -> crate::Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| crate::Error::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a pool that is already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
