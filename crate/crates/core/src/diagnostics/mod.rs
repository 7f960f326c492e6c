//! Measurements over traces and feature matrices: stable rank, cosine
//! similarity, variance and explosion fits, and correlation statistics.

mod fits;
mod record;
mod spectral;
mod stats;

pub use fits::{
    explosion_fit, grad_std_correlation, mean_training_accuracy, rank_vs_group_fit, tradeoff_curve,
    ExplosionFit, TradeoffPoint,
};
pub use record::DiagnosticRecord;
pub use spectral::{mean_pairwise_cosine, stable_rank, CosineSimilarity};
pub use stats::{linear_fit, pearson, pooled_slope, ranks, spearman, LinearFit};

use crate::error::Result;
use crate::net::PropagationTrace;

/// Common slope of `f(stat)` against block index within each stage, one
/// intercept per stage. Layers outside stages (the stem) are skipped.
pub fn within_stage_slope(
    trace: &PropagationTrace,
    stat: impl Fn(&crate::net::LayerStats) -> f64,
) -> Result<f64> {
    let mut segments: Vec<Vec<f64>> = Vec::new();
    let mut current = None;
    for l in &trace.layers {
        let Some(s) = l.stage else { continue };
        if current != Some(s) {
            segments.push(Vec::new());
            current = Some(s);
        }
        segments.last_mut().expect("pushed above").push(stat(l));
    }
    let refs: Vec<&[f64]> = segments.iter().map(Vec::as_slice).collect();
    pooled_slope(&refs)
}
