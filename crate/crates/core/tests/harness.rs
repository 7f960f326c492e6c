use std::io::Write;

use normprop::harness::{
    cifar_pixels, load_cifar100, run, serialize_cifar100, synthetic_blobs, to_csv, train_sgd,
    CifarRecord, ExperimentConfig, ExperimentKind, TrainHyper,
};
use normprop::net::{build, NetworkSpec};
use normprop::norm::{NormKind, NormalizerSpec};
use normprop::{Error, Rng};

fn tiny(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(kind);
    c.seeds = vec![3];
    c
}

#[test]
fn same_config_gives_identical_csv() {
    let mut c = tiny(ExperimentKind::RankSweep);
    c.depth = 6;
    c.width = 16;
    c.group_sizes = vec![1, 4, 16];
    c.batch = 16;
    let a = to_csv(&run(&c).unwrap()).unwrap();
    let b = to_csv(&run(&c).unwrap()).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("experiment,normalizer,params,arch,seed,metric,layer,value\n"));
}

#[test]
fn variance_profile_records_every_layer() {
    let mut c = tiny(ExperimentKind::VarianceProfile);
    c.normalizers = vec![NormKind::BatchNorm];
    c.blocks_per_stage = 2;
    c.input_size = 8;
    c.batch = 8;
    c.stat_batches = 1;
    let b = run(&c).unwrap();
    assert_eq!(b.values("second_moment").len(), 1 + 3 * 2);
    assert_eq!(b.values("slope").len(), 1);
    assert!(b.records.iter().all(|r| r.value.is_finite()));
}

#[test]
fn exploding_cells_report_divergence() {
    let mut c = tiny(ExperimentKind::VarianceProfile);
    c.normalizers = vec![NormKind::WeightNorm];
    c.topologies = vec![normprop::net::Topology::Standard];
    c.input_size = 8;
    c.batch = 8;
    c.stat_batches = 1;
    c.variance_threshold = 1e3;
    let b = run(&c).unwrap();
    assert_eq!(b.values("first_over_threshold").len(), 1);
}

#[test]
fn config_text_rejects_unknown_keys_and_sections() {
    let k = ExperimentKind::CossimSweep;
    assert!(ExperimentConfig::from_str_with(k, "batch = 8\nseeds = [1, 2]").is_ok());
    assert!(matches!(
        ExperimentConfig::from_str_with(k, "bacth = 8"),
        Err(Error::Config(_))
    ));
    assert!(ExperimentConfig::from_str_with(k, "[net]\nbatch = 8").is_err());
    assert!(ExperimentConfig::from_str_with(k, "experiment = \"rank-sweep\"").is_err());
}

#[test]
fn cifar_file_loads_and_standardizes() {
    let records: Vec<CifarRecord> = (0..3u8)
        .map(|i| CifarRecord {
            coarse: i,
            fine: 40 + i,
            pixels: Box::new([i.wrapping_mul(100); 3072]),
        })
        .collect();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&serialize_cifar100(&records)).unwrap();
    let d = load_cifar100(f.path()).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.labels, vec![40, 41, 42]);
    assert_eq!(d.inputs.shape(), &[3, 3, 32, 32]);
    let px = cifar_pixels(&records);
    let back: Vec<f64> = px.iter().map(|v| (v - 0.5) / 0.5).collect();
    assert_eq!(&back[..], d.inputs.data());
    let n = px.len() as f64;
    let m = px.iter().sum::<f64>() / n;
    let sd = (px.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    assert!((m - 0.5).abs() < 1e-12 && (sd - 0.5).abs() < 1e-12);

    let mut bad = tempfile::NamedTempFile::new().unwrap();
    bad.write_all(&serialize_cifar100(&records)[..3074 + 10])
        .unwrap();
    match load_cifar100(bad.path()) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 3074),
        other => panic!("expected a format error, got {other:?}"),
    }
}

fn blob_net(kind: NormKind) -> normprop::net::Network {
    let spec = NetworkSpec::cnn10(NormalizerSpec::new(kind))
        .with_width_scale(0.125)
        .with_input(3, 8, 8)
        .with_classes(4);
    build(&spec, &Rng::new(1)).unwrap()
}

#[test]
fn zero_learning_rate_keeps_accuracy_flat() {
    let data = synthetic_blobs(4, 64, [3, 8, 8], 1.0, &Rng::new(2)).unwrap();
    let mut net = blob_net(NormKind::LayerNorm);
    let before = net.params().to_vec();
    let hyper = TrainHyper {
        learning_rate: 0.0,
        epochs: 3,
        batch: 16,
        ..Default::default()
    };
    let out = train_sgd(&mut net, &data, &hyper, &Rng::new(3)).unwrap();
    assert_eq!(net.params(), &before[..]);
    assert!(out.accuracy.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_on_blobs_beats_chance() {
    let data = synthetic_blobs(4, 128, [3, 8, 8], 1.0, &Rng::new(2)).unwrap();
    let mut net = blob_net(NormKind::BatchNorm);
    let hyper = TrainHyper {
        epochs: 4,
        batch: 16,
        ..Default::default()
    };
    let out = train_sgd(&mut net, &data, &hyper, &Rng::new(3)).unwrap();
    assert!(out.diverged_at.is_none());
    assert!(*out.accuracy.last().unwrap() > 0.5, "{:?}", out.accuracy);
}
