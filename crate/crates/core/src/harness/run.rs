use std::time::Instant;

use super::checks::identity_checks;
use super::config::{DataSource, ExperimentConfig, ExperimentKind};
use super::data::{load_cifar100, synthetic_blobs, synthetic_gaussian, Dataset};
use super::pool::par_map;
use super::report::{Divergence, ReportBundle};
use super::train::{train_sgd, TrainHyper};
use crate::autodiff::{layerwise_grad_norms, Aggregation, GradientTrace, LossKind};
use crate::diagnostics::{
    explosion_fit, grad_std_correlation, mean_pairwise_cosine, mean_training_accuracy,
    rank_vs_group_fit, spearman, stable_rank, tradeoff_curve, within_stage_slope, DiagnosticRecord,
};
use crate::error::{Error, Result};
use crate::net::{
    build, final_features, forward_with_trace, penultimate_activations, PropagationTrace, Topology,
    TraceOptions,
};
use crate::norm::{NormKind, NormalizerSpec};
use crate::tensor::{Rng, Tensor};

/// Samples used to measure the initial cosine similarity before training.
const INIT_COSINE_SAMPLES: usize = 32;

/// Identity of one grid cell; every record it emits carries these fields.
#[derive(Clone, Debug)]
struct Cell {
    experiment: String,
    normalizer: String,
    params: String,
    arch: String,
    batch: usize,
    seed: u64,
}

impl Cell {
    fn new(
        cfg: &ExperimentConfig,
        normalizer: &str,
        params: String,
        arch: &str,
        batch: usize,
        seed: u64,
    ) -> Self {
        Self {
            experiment: cfg.experiment.to_string(),
            normalizer: normalizer.into(),
            params,
            arch: arch.into(),
            batch,
            seed,
        }
    }

    fn rec(&self, metric: &str, layer: Option<usize>, value: f64) -> DiagnosticRecord {
        DiagnosticRecord {
            experiment: self.experiment.clone(),
            normalizer: self.normalizer.clone(),
            params: self.params.clone(),
            arch: self.arch.clone(),
            batch: self.batch,
            seed: self.seed,
            metric: metric.into(),
            layer,
            value,
            diverged: false,
        }
    }

    fn diverged(&self, stage: &str, at: usize) -> (DiagnosticRecord, Divergence) {
        let mut r = self.rec("diverged_at", Some(at), at as f64);
        r.diverged = true;
        let d = Divergence {
            normalizer: self.normalizer.clone(),
            params: self.params.clone(),
            seed: self.seed,
            stage: stage.into(),
            at,
        };
        (r, d)
    }
}

#[derive(Default)]
struct CellOut {
    records: Vec<DiagnosticRecord>,
    divergences: Vec<Divergence>,
}

impl CellOut {
    fn push(&mut self, r: DiagnosticRecord) {
        if r.value.is_finite() {
            self.records.push(r);
        }
    }
}

/// Executes the configured grid. Divergence is recorded, not fatal.
pub fn run(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let start = Instant::now();
    let mut bundle = ReportBundle::new(cfg.clone());
    let outs = match cfg.experiment {
        ExperimentKind::VarianceProfile => variance_profile(cfg)?,
        ExperimentKind::RankSweep => rank_sweep(cfg)?,
        ExperimentKind::CossimSweep => cossim_sweep(cfg)?,
        ExperimentKind::GradProfile => grad_profile(cfg)?,
        ExperimentKind::Tradeoff => tradeoff(cfg)?,
        ExperimentKind::TrainCorrelate => train_correlate(cfg)?,
        ExperimentKind::GradCheck => grad_check(cfg)?,
    };
    for o in outs {
        bundle.records.extend(o.records);
        bundle.divergences.extend(o.divergences);
    }
    bundle.normalize_order();
    bundle.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(bundle)
}

fn weights_rng(seed: u64) -> Rng {
    Rng::new(seed).fork_named("weights")
}

fn data_rng(seed: u64) -> Rng {
    Rng::new(seed).fork_named("data")
}

fn gaussian_batch(cfg: &ExperimentConfig, n: usize, seed: u64, k: u64) -> Result<Tensor> {
    Ok(synthetic_gaussian(n, cfg.input_shape(), &data_rng(seed))?.batch(k))
}

/// Propagation statistics averaged over `stat_batches` Gaussian batches.
pub fn averaged_trace(
    cfg: &ExperimentConfig,
    normalizer: NormalizerSpec,
    topology: Topology,
    seed: u64,
) -> Result<PropagationTrace> {
    let net = build(&cfg.network(normalizer, topology)?, &weights_rng(seed))?;
    let inputs = synthetic_gaussian(cfg.batch, cfg.input_shape(), &data_rng(seed))?;
    let traces = (0..cfg.stat_batches as u64)
        .map(|k| Ok(forward_with_trace(&net, &inputs.batch(k), TraceOptions::default())?.1))
        .collect::<Result<Vec<_>>>()?;
    PropagationTrace::average(&traces)
}

fn variance_profile(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    let mut cells = Vec::new();
    for &k in &cfg.normalizers {
        for t in cfg.grid_topologies() {
            for &s in &cfg.seeds {
                cells.push((k, t, s));
            }
        }
    }
    par_map(&cells, cfg.workers, |&(kind, topo, seed)| {
        let ns = cfg.normalizer_spec(kind);
        let spec = cfg.network(ns, topo)?;
        let mut params = format!("{};topology={topo};batch={}", ns.params_label(), cfg.batch);
        if spec.skip_init && topo != Topology::SkipInit {
            params.push_str(";skip_init");
        }
        let cell = Cell::new(cfg, kind.name(), params, &spec.arch, cfg.batch, seed);
        let trace = averaged_trace(cfg, ns, topo, seed)?;
        let mut out = CellOut::default();
        for l in &trace.layers {
            out.push(cell.rec("second_moment", Some(l.layer), l.second_moment));
            out.push(cell.rec("variance", Some(l.layer), l.variance));
            out.push(cell.rec("mean", Some(l.layer), l.mean));
        }
        if let Some(at) = trace.diverged_at {
            let (r, d) = cell.diverged("forward", at);
            out.records.push(r);
            out.divergences.push(d);
        }
        if let Some(l) = trace
            .layers
            .iter()
            .find(|l| l.second_moment > cfg.variance_threshold)
        {
            out.push(cell.rec("first_over_threshold", Some(l.layer), l.layer as f64));
        }
        if spec.is_residual() {
            let blocks: Vec<f64> = trace
                .layers
                .iter()
                .filter(|l| l.stage.is_some())
                .map(|l| l.second_moment)
                .collect();
            if let Ok(s) = within_stage_slope(&trace, |l| l.second_moment) {
                out.push(cell.rec("slope", None, s));
            }
            if blocks.iter().all(|v| *v > 0.0) {
                if let Ok(s) = within_stage_slope(&trace, |l| l.second_moment.log2()) {
                    out.push(cell.rec("log2_slope", None, s));
                }
                let max = blocks.iter().copied().fold(f64::MIN, f64::max);
                let min = blocks.iter().copied().fold(f64::MAX, f64::min);
                out.push(cell.rec("max_min_ratio", None, max / min));
            }
        } else if let Some(last) = trace.layers.last() {
            out.push(cell.rec(
                "final_log10_variance",
                Some(last.layer),
                last.variance.log10(),
            ));
        }
        Ok(out)
    })
}

/// Pooled penultimate features with each feature centered across samples.
pub fn centered_penultimate(net: &crate::net::Network, batch: &Tensor) -> Result<Tensor> {
    let mut y = penultimate_activations(net, batch)?;
    let n = y.dim(1);
    for row in y.data_mut().chunks_mut(n) {
        let m = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
    Ok(y)
}

fn rank_sweep(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    let cells: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.group_sizes.iter().map(move |&g| (s, g)))
        .collect();
    let ranks = par_map(&cells, cfg.workers, |&(seed, g)| {
        let ns = NormalizerSpec::group_norm_size(g).with_eps(cfg.eps);
        let net = build(&cfg.network(ns, Topology::None)?, &weights_rng(seed))?;
        stable_rank(&centered_penultimate(
            &net,
            &gaussian_batch(cfg, cfg.batch, seed, 0)?,
        )?)
    })?;
    let arch = format!("plain{}x{}", cfg.depth, cfg.width);
    let mut out = CellOut::default();
    let gs = &cfg.group_sizes;
    let mut mean = vec![0.0; gs.len()];
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let rs = &ranks[si * gs.len()..(si + 1) * gs.len()];
        for (&g, &r) in gs.iter().zip(rs) {
            out.push(
                Cell::new(cfg, "gn", format!("g={g}"), &arch, cfg.batch, seed).rec(
                    "stable_rank",
                    None,
                    r,
                ),
            );
        }
        mean.iter_mut()
            .zip(rs)
            .for_each(|(m, r)| *m += r / cfg.seeds.len() as f64);
        if let Ok(f) = rank_vs_group_fit(cfg.width, gs, rs) {
            let c = Cell::new(cfg, "gn", "fit".into(), &arch, cfg.batch, seed);
            out.push(c.rec("pearson_r", None, f.r));
            out.push(c.rec("slope", None, f.slope));
            out.push(c.rec("intercept", None, f.intercept));
        }
    }
    let f = rank_vs_group_fit(cfg.width, gs, &mean)?;
    let c = Cell::new(
        cfg,
        "gn",
        format!("fit;seed_mean;seeds={}", cfg.seeds.len()),
        &arch,
        cfg.batch,
        cfg.seeds[0],
    );
    out.push(c.rec("pearson_r", None, f.r));
    out.push(c.rec("slope", None, f.slope));
    out.push(c.rec("intercept", None, f.intercept));
    Ok(vec![out])
}

#[derive(Clone, Copy, Debug)]
enum CosineCell {
    Group(usize),
    Endpoint(NormKind),
}

fn cossim_sweep(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    let mut variants: Vec<CosineCell> = cfg
        .group_sizes
        .iter()
        .map(|&g| CosineCell::Group(g))
        .collect();
    variants.push(CosineCell::Endpoint(NormKind::InstanceNorm));
    variants.push(CosineCell::Endpoint(NormKind::LayerNorm));
    let cells: Vec<(u64, CosineCell)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (s, v)))
        .collect();
    let arch = cfg.arch.clone();
    let values = par_map(&cells, cfg.workers, |&(seed, v)| {
        let ns = match v {
            CosineCell::Group(g) => NormalizerSpec::group_norm_size(g),
            CosineCell::Endpoint(k) => NormalizerSpec::new(k),
        }
        .with_eps(cfg.eps);
        let net = build(&cfg.network(ns, Topology::None)?, &weights_rng(seed))?;
        Ok(mean_pairwise_cosine(&final_features(
            &net,
            &gaussian_batch(cfg, cfg.batch, seed, 0)?,
        )?)?
        .mean)
    })?;
    let mut out = CellOut::default();
    let (mut rho_sum, mut gap_sum) = (0.0, 0.0);
    let per = variants.len();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let vals = &values[si * per..(si + 1) * per];
        for (v, &c) in variants.iter().zip(vals) {
            let cell = match v {
                CosineCell::Group(g) => {
                    Cell::new(cfg, "gn", format!("g={g}"), &arch, cfg.batch, seed)
                }
                CosineCell::Endpoint(k) => {
                    Cell::new(cfg, k.name(), "endpoint".into(), &arch, cfg.batch, seed)
                }
            };
            out.push(cell.rec("cosine", None, c));
        }
        let g = cfg.group_sizes.len();
        let xs: Vec<f64> = cfg.group_sizes.iter().map(|&g| g as f64).collect();
        let rho = spearman(&xs, &vals[..g]).unwrap_or(0.0);
        let gap = vals[g + 1] - vals[g];
        let c = Cell::new(cfg, "gn", "sweep".into(), &arch, cfg.batch, seed);
        out.push(c.rec("spearman_rho", None, rho));
        out.push(c.rec("ln_minus_in", None, gap));
        rho_sum += rho;
        gap_sum += gap;
    }
    let n = cfg.seeds.len() as f64;
    let c = Cell::new(
        cfg,
        "gn",
        format!("sweep;seed_mean;seeds={}", cfg.seeds.len()),
        &arch,
        cfg.batch,
        cfg.seeds[0],
    );
    out.push(c.rec("spearman_rho", None, rho_sum / n));
    out.push(c.rec("ln_minus_in", None, gap_sum / n));
    Ok(vec![out])
}

/// Gradient traces for one network on a fixed pool of `stat_batches ×
/// max(batch_sizes)` samples, split at each batch size and combined by RMS.
pub fn pooled_grad_traces(
    cfg: &ExperimentConfig,
    normalizer: NormalizerSpec,
    seed: u64,
) -> Result<Vec<(usize, GradientTrace)>> {
    let net = build(
        &cfg.network(normalizer, cfg.grid_topologies()[0])?,
        &weights_rng(seed),
    )?;
    let largest = cfg
        .batch_sizes
        .iter()
        .copied()
        .max()
        .unwrap_or(cfg.batch)
        .max(cfg.batch);
    let pool_n = largest * cfg.stat_batches;
    let pool = gaussian_batch(cfg, pool_n, seed, 0)?;
    let mut lr = data_rng(seed).fork_named("probe-labels");
    let labels: Vec<usize> = (0..pool_n).map(|_| lr.below(cfg.classes.max(1))).collect();
    let mut sizes = vec![cfg.batch];
    sizes.extend(cfg.batch_sizes.iter().filter(|&&b| b != cfg.batch));
    sizes
        .into_iter()
        .map(|b| {
            let traces = (0..pool_n / b)
                .map(|i| {
                    let x = pool.batch_slice(i * b, (i + 1) * b)?;
                    let y =
                        (cfg.loss == LossKind::CrossEntropy).then(|| &labels[i * b..(i + 1) * b]);
                    layerwise_grad_norms(&net, &x, cfg.loss, y)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((b, GradientTrace::aggregate(&traces, Aggregation::Rms)?))
        })
        .collect()
}

fn grad_profile(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    let cells: Vec<(NormKind, u64)> = cfg
        .normalizers
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    par_map(&cells, cfg.workers, |&(kind, seed)| {
        let ns = cfg.normalizer_spec(kind);
        let arch = cfg.network(ns, cfg.grid_topologies()[0])?.arch;
        let mut out = CellOut::default();
        let traces = match pooled_grad_traces(cfg, ns, seed) {
            Err(Error::Diverged { layer }) => {
                let cell = Cell::new(cfg, kind.name(), ns.params_label(), &arch, cfg.batch, seed);
                let (r, d) = cell.diverged("forward", layer);
                out.records.push(r);
                out.divergences.push(d);
                return Ok(out);
            }
            other => other?,
        };
        for (b, t) in traces {
            let cell = Cell::new(
                cfg,
                kind.name(),
                format!("{};batch={b};loss={}", ns.params_label(), cfg.loss.name()),
                &arch,
                b,
                seed,
            );
            for (l, (g, s)) in t.grad_norms.iter().zip(&t.sigmas).enumerate() {
                out.push(cell.rec("grad_norm", Some(l), *g));
                out.push(cell.rec("sigma", Some(l), *s));
            }
            let fit = explosion_fit(&t.grad_norms)?;
            out.push(cell.rec("explosion_rate", None, fit.rate));
            out.push(cell.rec("r2", None, fit.r2));
            for l in fit.excluded {
                out.push(cell.rec("zero_norm_layer", Some(l), l as f64));
            }
        }
        Ok(out)
    })
}

fn tradeoff(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    par_map(&cfg.seeds, cfg.workers, |&seed| {
        let spec = cfg.network(cfg.normalizer_spec(NormKind::GroupNorm), Topology::None)?;
        let batch = gaussian_batch(cfg, cfg.batch, seed, 0)?;
        let curve = tradeoff_curve(&spec, &cfg.group_sizes, &batch, &weights_rng(seed))?;
        let mut out = CellOut::default();
        for p in &curve {
            let c = Cell::new(
                cfg,
                "gn",
                format!("g={}", p.group_size),
                &spec.arch,
                cfg.batch,
                seed,
            );
            out.push(c.rec("cosine", None, p.cosine));
            out.push(c.rec("explosion_rate", None, p.explosion_rate));
        }
        let xs: Vec<f64> = curve.iter().map(|p| p.group_size as f64).collect();
        let c = Cell::new(cfg, "gn", "sweep".into(), &spec.arch, cfg.batch, seed);
        if let Ok(r) = spearman(&xs, &curve.iter().map(|p| p.cosine).collect::<Vec<_>>()) {
            out.push(c.rec("cosine_spearman_rho", None, r));
        }
        if let Ok(r) = spearman(
            &xs,
            &curve.iter().map(|p| p.explosion_rate).collect::<Vec<_>>(),
        ) {
            out.push(c.rec("rate_spearman_rho", None, r));
        }
        Ok(out)
    })
}

fn training_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match cfg.data {
        DataSource::Cifar100 => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Config("missing data_path".into()))?;
            let d = load_cifar100(path)?;
            let n = cfg.train_samples.min(d.len());
            let (inputs, labels) = d.gather(&(0..n).collect::<Vec<_>>())?;
            Ok(Dataset {
                inputs,
                labels,
                classes: d.classes,
            })
        }
        _ => synthetic_blobs(
            cfg.classes,
            cfg.train_samples,
            cfg.input_shape(),
            cfg.blob_spread,
            &data_rng(seed).fork_named("blobs"),
        ),
    }
}

/// Per-run result of train-correlate.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub init_cosine: f64,
    pub mean_accuracy: Option<f64>,
    pub accuracy: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub grad_std_r: Option<f64>,
}

pub fn train_run(cfg: &ExperimentConfig, kind: NormKind, seed: u64) -> Result<TrainRun> {
    let data = training_data(cfg, seed)?;
    let mut spec = cfg.network(cfg.normalizer_spec(kind), Topology::None)?;
    spec.num_classes = data.classes;
    let mut net = build(&spec, &weights_rng(seed))?;
    let probe = gaussian_batch(cfg, INIT_COSINE_SAMPLES, seed, 1)?;
    let init_cosine = mean_pairwise_cosine(&final_features(&net, &probe)?)?.mean;
    let hyper = TrainHyper {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch: cfg.batch,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        record_gradients: true,
    };
    let outcome = train_sgd(&mut net, &data, &hyper, &Rng::new(seed).fork_named("train"))?;
    let layer = cfg.probe_layer.min(net.depth().saturating_sub(2));
    let grad_std_r = if outcome.gradients.len() >= 3 {
        let g: Vec<f64> = outcome
            .gradients
            .iter()
            .map(|t| t.grad_norms[layer])
            .collect();
        let s: Vec<Vec<f64>> = outcome.gradients.iter().map(|t| t.sigmas.clone()).collect();
        grad_std_correlation(&g, &s, layer).ok()
    } else {
        None
    };
    Ok(TrainRun {
        init_cosine,
        mean_accuracy: mean_training_accuracy(&outcome.accuracy).ok(),
        accuracy: outcome.accuracy,
        diverged_at: outcome.diverged_at,
        grad_std_r,
    })
}

fn train_correlate(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    let cells: Vec<(NormKind, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.normalizers.iter().map(move |&k| (k, s)))
        .collect();
    let runs = par_map(&cells, cfg.workers, |&(k, s)| train_run(cfg, k, s))?;
    let mut out = CellOut::default();
    let arch = cfg.arch.clone();
    let mut rhos = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let mut cos = Vec::new();
        let mut acc = Vec::new();
        for (ki, &kind) in cfg.normalizers.iter().enumerate() {
            let run = &runs[si * cfg.normalizers.len() + ki];
            let c = Cell::new(
                cfg,
                kind.name(),
                cfg.normalizer_spec(kind).params_label(),
                &arch,
                cfg.batch,
                seed,
            );
            out.push(c.rec("init_cosine", None, run.init_cosine));
            for (e, a) in run.accuracy.iter().enumerate() {
                out.push(c.rec("epoch_accuracy", Some(e), *a));
            }
            match run.grad_std_r {
                Some(r) => out.push(c.rec("grad_std_correlation", Some(cfg.probe_layer), r)),
                None => {
                    out.push(c.rec("grad_std_correlation_undefined", Some(cfg.probe_layer), 1.0))
                }
            }
            if let Some(at) = run.diverged_at {
                let (r, d) = c.diverged("training", at);
                out.records.push(r);
                out.divergences.push(d);
            }
            // A diverged run is excluded from the correlation but reported.
            if let (Some(m), None) = (run.mean_accuracy, run.diverged_at) {
                out.push(c.rec("mean_train_accuracy", None, m));
                cos.push(run.init_cosine);
                acc.push(m);
            }
        }
        if let Ok(r) = spearman(&cos, &acc) {
            out.push(
                Cell::new(cfg, "all", "correlation".into(), &arch, cfg.batch, seed).rec(
                    "spearman_rho",
                    None,
                    r,
                ),
            );
            rhos.push(r);
        }
    }
    if !rhos.is_empty() {
        let c = Cell::new(
            cfg,
            "all",
            format!("correlation;seed_mean;seeds={}", rhos.len()),
            &arch,
            cfg.batch,
            cfg.seeds[0],
        );
        out.push(c.rec(
            "spearman_rho",
            None,
            rhos.iter().sum::<f64>() / rhos.len() as f64,
        ));
    }
    Ok(vec![out])
}

fn grad_check(cfg: &ExperimentConfig) -> Result<Vec<CellOut>> {
    par_map(&cfg.seeds, cfg.workers, |&seed| {
        let r = identity_checks(cfg.instances, cfg.monte_carlo_draws, &Rng::new(seed))?;
        let c = Cell::new(
            cfg,
            "bn+gn",
            format!("instances={}", r.instances),
            "none",
            0,
            seed,
        );
        let mut out = CellOut::default();
        for (m, v) in [
            ("bn_vs_autodiff", r.bn_vs_autodiff),
            ("gn_vs_autodiff", r.gn_vs_autodiff),
            ("bn_vs_finite_diff", r.bn_vs_finite_diff),
            ("gn_vs_finite_diff", r.gn_vs_finite_diff),
            ("projector_idempotence", r.projector_idempotence),
            ("projector_orthogonality", r.projector_orthogonality),
            ("amhm_violations", r.amhm_violations as f64),
            ("amhm_checked", r.amhm_checked as f64),
            ("gn1_vs_in", r.gn1_vs_in),
            ("gnc_vs_ln", r.gnc_vs_ln),
            ("moment_invariants", r.moment_invariants),
            ("wn_variance", r.wn_variance),
            ("sws_variance", r.sws_variance),
            ("correction_scale", r.correction_scale),
        ] {
            out.push(c.rec(m, None, v));
        }
        Ok(out)
    })
}
