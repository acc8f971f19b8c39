use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtl_core::datasets::{Dataset, MetricKind, Split, SplitPair, SyntheticSpec};
use rtl_core::models::{ModelConfig, Network};
use rtl_core::trainer::{train, TrainConfig};
use rtl_core::transfer::{evaluate, probe_features, transfer, transfer_at, TransferMode};
use rtl_core::{Error, Tensor};

fn config(batchnorm: bool, classes: usize) -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        input_size: 8,
        base_channels: 4,
        width_multiplier: 1,
        num_blocks: 2,
        num_classes: classes,
        use_batchnorm: batchnorm,
        seed: 23,
    }
}

fn source(batchnorm: bool) -> Network {
    let data = blobs(4, 1).train;
    let cfg = TrainConfig { batch_size: 16, lr: 0.05, seed: 1, ..TrainConfig::pretraining().with_epochs(3) };
    train(Network::build(config(batchnorm, 4)).unwrap(), &data, &cfg).unwrap().0
}

fn blobs(classes: usize, seed: u64) -> SplitPair {
    SyntheticSpec::Blobs {
        class_count: classes,
        n_per_class: 20,
        channels: 2,
        size: 8,
        margin: 1.5,
        sigma: 0.2,
        seed,
        metric_kind: MetricKind::Top1,
    }
    .generate("target")
    .unwrap()
}

fn short(lr: f64) -> TrainConfig {
    TrainConfig { batch_size: 16, seed: 8, ..TrainConfig::transfer(lr).with_epochs(3) }
}

fn bits(ts: &[&Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn backbone_bits(net: &Network) -> Vec<u64> {
    let p = net.params();
    bits(&p[..p.len() - Network::HEAD_PARAM_TENSORS])
}

#[test]
fn fixed_feature_freezes_weights_but_not_statistics() {
    let pretrained = source(true);
    let target = blobs(3, 2);
    let out = transfer(&pretrained, &target, TransferMode::FixedFeature, &short(0.01), 5).unwrap();
    assert_eq!(backbone_bits(&out.network), backbone_bits(&pretrained));
    let before: Vec<u64> =
        pretrained.running_stats().iter().flat_map(|(m, v)| bits(&[m, v])).collect();
    let after: Vec<u64> =
        out.network.running_stats().iter().flat_map(|(m, v)| bits(&[m, v])).collect();
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    assert_eq!(out.network.num_classes(), 3);
    assert!((0.0..=1.0).contains(&out.metric));
}

#[test]
fn full_network_updates_the_backbone() {
    let pretrained = source(true);
    let out = transfer(&pretrained, &blobs(3, 2), TransferMode::FullNetwork, &short(0.01), 5).unwrap();
    assert_ne!(backbone_bits(&out.network), backbone_bits(&pretrained));
}

#[test]
fn zero_learning_rate_keeps_parameters_and_initial_metric() {
    let pretrained = source(false);
    let target = blobs(3, 3);
    let cfg = TrainConfig { augment: false, ..short(0.0) };
    let out = transfer_at(&pretrained, &target, TransferMode::FullNetwork, &cfg, 11).unwrap();
    let initial = pretrained.replace_head(3, 11).unwrap();
    assert_eq!(bits(&out.network.params()), bits(&initial.params()));
    assert_eq!(out.metric, evaluate(&initial, &target.test, false).unwrap());
}

#[test]
fn full_network_from_untrained_source_is_training_from_scratch() {
    let untrained = Network::build(config(true, 4)).unwrap();
    let target = blobs(3, 4);
    let cfg = short(0.01);
    let out = transfer_at(&untrained, &target, TransferMode::FullNetwork, &cfg, 13).unwrap();
    let (scratch, _) = train(untrained.replace_head(3, 13).unwrap(), &target.train, &cfg).unwrap();
    assert_eq!(bits(&out.network.params()), bits(&scratch.params()));
}

#[test]
fn transfer_is_deterministic() {
    let pretrained = source(true);
    let target = blobs(3, 5);
    let a = transfer(&pretrained, &target, TransferMode::FullNetwork, &short(0.01), 2).unwrap();
    let b = transfer(&pretrained, &target, TransferMode::FullNetwork, &short(0.01), 2).unwrap();
    assert_eq!(bits(&a.network.params()), bits(&b.network.params()));
    assert_eq!(a.metric.to_bits(), b.metric.to_bits());
    assert_eq!(a.lr, b.lr);
}

#[test]
fn probe_rows_are_deterministic_and_rank_bounded() {
    let pretrained = source(true);
    let ds = blobs(3, 6).train;
    let dup = ds.batch(&[0, 0, 1]).unwrap();
    let dup = Dataset::new("dup", dup.0, dup.1, Split::Test, MetricKind::Top1, 3).unwrap();
    let (f, _) = probe_features(&pretrained, &dup).unwrap();
    assert_eq!(f.row(0), f.row(1));
    let (f, labels) = probe_features(&pretrained, &ds).unwrap();
    assert_eq!(labels, ds.labels);
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, f.data());
    assert!(m.rank(1e-10) <= n.min(d));
}

#[test]
fn probe_rejects_wrong_geometry() {
    let pretrained = source(true);
    let images = Tensor::full(&[2, 1, 8, 8], 0.5);
    let ds = Dataset::new("bad", images, vec![0, 1], Split::Test, MetricKind::Top1, 2).unwrap();
    assert!(matches!(probe_features(&pretrained, &ds), Err(Error::Dimension(_))));
}

/// Target task whose labels are a linear function of the frozen features:
/// the sign of a random projection, keeping only samples with a clear margin.
fn linearly_labeled(net: &Network, seed: u64) -> SplitPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = SyntheticSpec::Blobs {
        class_count: 4,
        n_per_class: 400,
        channels: 2,
        size: 8,
        margin: 1.5,
        sigma: 0.2,
        seed,
        metric_kind: MetricKind::Top1,
    }
    .generate("pool")
    .unwrap();
    let pool = source.train;
    let n = pool.len();
    let (f, _) = probe_features(net, &pool).unwrap();
    let d = f.shape()[1];
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw: Vec<f64> = (0..n).map(|i| f.row(i).iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[n / 2];
    let scores: Vec<f64> = raw.iter().map(|s| s - median).collect();
    let mut mags: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let cut = mags[n / 2];
    let keep: Vec<usize> = (0..n).filter(|&i| scores[i].abs() >= cut).collect();
    let labels: Vec<usize> = keep.iter().map(|&i| usize::from(scores[i] > 0.0)).collect();
    let x = pool.images.select_rows(&keep).unwrap();
    let half = keep.len() / 2;
    let idx_train: Vec<usize> = (0..half).collect();
    let idx_test: Vec<usize> = (half..keep.len()).collect();
    let make = |idx: &[usize], split| {
        let xs = x.select_rows(idx).unwrap();
        let ys = idx.iter().map(|&i| labels[i]).collect();
        Dataset::new("linear", xs, ys, split, MetricKind::Top1, 2).unwrap()
    };
    SplitPair { train: make(&idx_train, Split::Train), test: make(&idx_test, Split::Test) }
}

/// Least-squares fit of ±1 targets on `[features, 1]`, scored on `test`.
fn least_squares_probe(net: &Network, pair: &SplitPair) -> f64 {
    let design = |ds: &Dataset| {
        let (f, _) = probe_features(net, ds).unwrap();
        let (n, d) = (f.shape()[0], f.shape()[1]);
        DMatrix::from_fn(n, d + 1, |i, j| if j < d { f.row(i)[j] } else { 1.0 })
    };
    let a = design(&pair.train);
    let t = DVector::from_iterator(pair.train.len(), pair.train.labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }));
    let coef = a.clone().svd(true, true).solve(&t, 1e-12).unwrap();
    let scores = design(&pair.test) * coef;
    let hits = scores.iter().zip(&pair.test.labels).filter(|(s, &y)| (**s > 0.0) == (y == 1)).count();
    hits as f64 / pair.test.len() as f64
}

#[test]
fn fixed_feature_learns_linearly_realizable_targets() {
    let pretrained = source(false);
    let pair = linearly_labeled(&pretrained, 31);
    let cfg = TrainConfig { batch_size: 16, augment: false, seed: 4, ..TrainConfig::transfer(0.01) };
    let out = transfer(&pretrained, &pair, TransferMode::FixedFeature, &cfg, 3).unwrap();
    let oracle = least_squares_probe(&pretrained, &pair);
    assert!(out.metric >= 0.99, "fixed-feature accuracy {}", out.metric);
    assert!((oracle - out.metric).abs() <= 0.02, "least squares {oracle} vs transfer {}", out.metric);
}
