//! Browser bindings: small, fast versions of three experiments. Each call
//! returns a JSON string so the page needs no extra glue.

use normprop::autodiff::{layerwise_grad_norms, LossKind};
use normprop::diagnostics::{explosion_fit, mean_pairwise_cosine, stable_rank};
use normprop::harness::synthetic_gaussian;
use normprop::net::{
    build, final_features, forward_with_trace, NetworkSpec, Topology, TraceOptions,
};
use normprop::norm::{NormKind, NormalizerSpec};
use normprop::{Result, Rng};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const BATCH: usize = 16;

#[derive(Serialize)]
pub struct VarianceCurve {
    pub normalizer: String,
    pub topology: String,
    pub second_moments: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Per-layer `mean(y²)` of a quarter-width ResNet on Gaussian inputs.
pub fn variance_curve(
    normalizer: &str,
    topology: &str,
    blocks: usize,
    seed: u64,
) -> Result<VarianceCurve> {
    let kind: NormKind = normalizer.parse()?;
    let topo: Topology = topology.parse()?;
    let spec = NetworkSpec::resnet(NormalizerSpec::new(kind), topo, blocks.clamp(1, 9))
        .with_width_scale(0.25)
        .with_input(3, 16, 16);
    let rng = Rng::new(seed);
    let net = build(&spec, &rng.fork_named("weights"))?;
    let x = synthetic_gaussian(BATCH, spec.input, &rng.fork_named("data"))?.batch(0);
    let opts = TraceOptions {
        max_second_moment: Some(1e12),
        ..Default::default()
    };
    let (_, trace) = forward_with_trace(&net, &x, opts)?;
    Ok(VarianceCurve {
        normalizer: kind.name().into(),
        topology: topo.name().into(),
        second_moments: trace.second_moments(),
        diverged_at: trace.diverged_at,
    })
}

#[derive(Serialize)]
pub struct GroupPoint {
    pub group_size: usize,
    pub cosine: f64,
    pub stable_rank: f64,
}

/// Cosine similarity and stable rank of a 12-layer, 32-wide plain network
/// as the GroupNorm group size goes from 1 (instance) to 32 (layer).
pub fn group_sweep(seed: u64) -> Result<Vec<GroupPoint>> {
    let rng = Rng::new(seed);
    let x = synthetic_gaussian(BATCH, [3, 8, 8], &rng.fork_named("data"))?.batch(0);
    [1, 2, 4, 8, 16, 32]
        .into_iter()
        .map(|g| {
            let spec =
                NetworkSpec::plain(12, 32, NormalizerSpec::group_norm_size(g)).with_input(3, 8, 8);
            let net = build(&spec, &rng.fork_named("weights"))?;
            let f = final_features(&net, &x)?;
            Ok(GroupPoint {
                group_size: g,
                cosine: mean_pairwise_cosine(&f)?.mean,
                stable_rank: stable_rank(&f)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
pub struct GradientCurve {
    pub normalizer: String,
    pub grad_norms: Vec<f64>,
    pub explosion_rate: f64,
}

/// Layerwise gradient norms of a 12-layer, 32-wide plain network.
pub fn gradient_curve(normalizer: &str, seed: u64) -> Result<GradientCurve> {
    let kind: NormKind = normalizer.parse()?;
    let spec = NetworkSpec::plain(12, 32, NormalizerSpec::new(kind))
        .with_input(3, 8, 8)
        .with_classes(10);
    let rng = Rng::new(seed);
    let net = build(&spec, &rng.fork_named("weights"))?;
    let x = synthetic_gaussian(BATCH, spec.input, &rng.fork_named("data"))?.batch(0);
    let t = layerwise_grad_norms(&net, &x, LossKind::HalfSquaredNorm, None)?;
    let fit = explosion_fit(&t.grad_norms)?;
    Ok(GradientCurve {
        normalizer: kind.name().into(),
        grad_norms: t.grad_norms,
        explosion_rate: fit.rate,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = varianceCurve)]
pub fn variance_curve_js(
    normalizer: &str,
    topology: &str,
    blocks: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(variance_curve(normalizer, topology, blocks, seed.into()))
}

#[wasm_bindgen(js_name = groupSweep)]
pub fn group_sweep_js(seed: u32) -> std::result::Result<String, JsError> {
    to_js(group_sweep(seed.into()))
}

#[wasm_bindgen(js_name = gradientCurve)]
pub fn gradient_curve_js(normalizer: &str, seed: u32) -> std::result::Result<String, JsError> {
    to_js(gradient_curve(normalizer, seed.into()))
}
