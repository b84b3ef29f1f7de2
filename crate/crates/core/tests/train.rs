use std::collections::BTreeMap;
use std::path::Path;

use token_boost::exec::ExecMode;
use token_boost::tensor::Tensor;
use token_boost::train::stats::binomial_upper_tail;
use token_boost::train::{
    datasets, encoder_fingerprint, linear_probe, load_checkpoint, pretrain, read_metrics, supervised_grads,
    ExperimentConfig, PretrainOptions, TrainError,
};
use token_boost::vt::Vit;

fn small(n_train: usize, epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.n_train = n_train;
    c.data.n_test = 200;
    c.pretrain.epochs = epochs;
    c.pretrain.batch = 64;
    c.checkpoint_every = 1;
    c.probe.epochs = 30;
    c
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn total_loss_is_mae_plus_recon_exactly() {
    let cfg = small(128, 1);
    let (train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, 0, &train, dir.path(), &PretrainOptions::default(), ExecMode::Parallel).unwrap();
    let recs = read_metrics(&out.metrics).unwrap();
    let mut by_step: BTreeMap<u64, Vec<(String, f64)>> = BTreeMap::new();
    for r in recs.iter().filter(|r| r.metric != "epoch_mae_loss" && !r.metric.starts_with("alpha_")) {
        by_step.entry(r.step).or_default().push((r.metric.clone(), r.value));
    }
    assert_eq!(by_step.len(), 2);
    for (step, ms) in by_step {
        let get = |name: &str| ms.iter().find(|(m, _)| m == name).map(|(_, v)| *v).unwrap();
        let mut sum = get("mae_loss");
        for l in &cfg.encoder.tbm_layers {
            sum += get(&format!("recon_loss.tbm.{l}"));
        }
        assert_eq!(sum.to_bits(), get("total_loss").to_bits(), "step {step}");
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let cfg = small(128, 3);
    let (train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(&cfg, 1, &train, a.path(), &PretrainOptions::default(), ExecMode::Parallel).unwrap();
    let halted = PretrainOptions { resume: false, halt_after: Some(1) };
    let part = pretrain(&cfg, 1, &train, b.path(), &halted, ExecMode::Parallel).unwrap();
    assert_eq!(part.epochs_done, 1);
    let resume = PretrainOptions { resume: true, halt_after: None };
    pretrain(&cfg, 1, &train, b.path(), &resume, ExecMode::Parallel).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    // A changed schedule is a different run, not a continuation.
    let mut other = cfg.clone();
    other.pretrain.lr *= 2.0;
    let err = pretrain(&other, 1, &train, b.path(), &resume, ExecMode::Parallel).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn parallel_and_sequential_runs_are_identical() {
    let cfg = small(128, 1);
    let (train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pretrain(&cfg, 2, &train, a.path(), &PretrainOptions::default(), ExecMode::Parallel).unwrap();
    pretrain(&cfg, 2, &train, b.path(), &PretrainOptions::default(), ExecMode::Sequential).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn probe_leaves_the_encoder_untouched_and_beats_chance() {
    let cfg = small(512, 1);
    let (train, test) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let vit = Vit::new(cfg.encoder.clone(), cfg.lambda, 0).unwrap();
    let before = encoder_fingerprint(&vit);
    let r = linear_probe(&cfg, &vit, 0, &train, &test, ExecMode::Parallel).unwrap();
    assert_eq!(r.hash_before, before);
    assert_eq!(r.hash_after, before);
    // Random features still carry class information: one-sided binomial
    // test against 1/10 at the 1% level.
    let p = binomial_upper_tail(r.correct_clean as u64, r.n_test as u64, 0.1);
    assert!(p < 0.01, "clean accuracy {} (p = {p})", r.clean_acc);
}

#[test]
fn alpha_receives_gradient_in_supervised_training() {
    let cfg = small(64, 1);
    let (train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let mut vit = Vit::new(cfg.encoder.clone(), 1.0, 0).unwrap();
    for p in vit.store.iter_mut().filter(|p| p.name.ends_with("alpha_raw")) {
        p.value.data_mut().fill(0.2);
    }
    let ids: Vec<usize> = (0..16).collect();
    let (loss, grads) = supervised_grads(&vit, &train.batch(&ids), &train.labels[..16], 10, 0).unwrap();
    assert!(loss.is_finite());
    let mut seen = 0;
    for (p, g) in vit.store.iter().zip(&grads) {
        if p.name.ends_with("alpha_raw") {
            seen += 1;
            assert!(g.iter().any(|&x| x != 0.0), "{} has zero gradient", p.name);
        }
    }
    assert_eq!(seen, cfg.encoder.tbm_layers.len());
}

#[test]
fn lambda_zero_keeps_the_architecture() {
    let cfg = small(64, 1);
    let a = Vit::new(cfg.encoder.clone(), 0.0, 0).unwrap();
    let b = Vit::new(cfg.encoder.clone(), 1.0, 0).unwrap();
    assert_eq!(a.store.numel(), b.store.numel());
    assert_eq!(a.param_counts(), b.param_counts());
}

#[test]
fn two_epochs_reduce_the_mae_loss() {
    let cfg = small(512, 2);
    let (train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, 0, &train, dir.path(), &PretrainOptions::default(), ExecMode::Parallel).unwrap();
    let recs = read_metrics(&out.metrics).unwrap();
    let first = recs.iter().find(|r| r.metric == "mae_loss").unwrap().value;
    let last = *out.epoch_mae.last().unwrap();
    assert!(last <= 0.8 * first, "MAE loss {first} -> {last}");
    let ck = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ck.meta["epoch"].as_u64(), Some(2));
}

#[test]
fn non_finite_loss_is_reported_with_a_snapshot() {
    let mut cfg = small(64, 1);
    cfg.pretrain.lr = 1e250;
    let (mut train, _) = datasets(&cfg, ExecMode::Parallel).unwrap();
    // A single huge pixel overflows the squared error on the first step.
    let mut data = train.images.data().to_vec();
    data[0] = 1e200;
    train.images = Tensor::new(train.images.shape().to_vec(), data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match pretrain(&cfg, 0, &train, dir.path(), &PretrainOptions::default(), ExecMode::Parallel) {
        Err(TrainError::NonFinite { snapshot, metric, .. }) => {
            assert!(snapshot.exists(), "missing snapshot {}", snapshot.display());
            assert!(!metric.is_empty());
        }
        other => panic!("expected a non-finite diagnostic, got {other:?}"),
    }
}
