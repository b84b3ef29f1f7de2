use std::path::Path;

use super::metrics::MetricsLog;
use super::pretrain::warmup_alpha;
use super::{epoch_batches, reduce_grads, shards, steps_per_epoch, AlphaInit, ExperimentConfig, Result, TrainError, PROBE_CORRUPTION_TAG};
use crate::data::{CorruptionSpec, SyntheticDataset, EVAL_CORRUPTION_TAG};
use crate::exec::ExecMode;
use crate::tbm::{tbm_recon_loss, EvalNoise};
use crate::tensor::{AdamW, CosineSchedule, Graph, OptimState, ParamId, ParamStore, Rng, Stream, Tensor};
use crate::vt::{patchify, TbmNoise, Vit};

/// Hash of every encoder and TBM parameter (the decoder is excluded).
pub fn encoder_fingerprint(vit: &Vit) -> String {
    vit.store.fingerprint_where(|n| !n.starts_with("decoder."))
}

/// Mean-pooled encoder tokens for every image, `[N, K]` row-major, with all
/// patches visible. Batches draw TBM noise from eval stream `(tag, batch)`.
pub fn extract_features(
    vit: &Vit,
    data: &SyntheticDataset,
    noise: EvalNoise,
    seed: u64,
    tag: u64,
    shard: usize,
    exec: ExecMode,
) -> Result<Vec<f64>> {
    let t = vit.cfg.tokens();
    let k = vit.cfg.dim;
    let groups: Vec<(usize, Vec<usize>)> = shards(&(0..data.len()).collect::<Vec<_>>(), shard).into_iter().enumerate().collect();
    let parts = exec.map(groups, |(bi, ids)| -> Result<Vec<f64>> {
        let patches = patchify(&data.batch(&ids), vit.cfg.patch)?;
        let all = vec![(0..t).collect::<Vec<_>>(); ids.len()];
        let mut rng = Rng::for_purpose(seed, Stream::Eval, (tag << 32) | bi as u64);
        let mode = match noise {
            EvalNoise::Sample => TbmNoise::Sample(&mut rng),
            EvalNoise::Mean => TbmNoise::Mean,
        };
        let mut g = Graph::new();
        let b = g.bind(&vit.store, false)?;
        let (x, _) = vit.encode(&mut g, &b, &patches, &all, mode)?;
        let x = g.mean_axis(x, 1)?;
        Ok(g.value(x).data().to_vec())
    });
    let mut out = Vec::with_capacity(data.len() * k);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ProbeResult {
    pub clean_acc: f64,
    pub corrupt_acc: f64,
    pub train_acc: f64,
    pub n_test: usize,
    pub correct_clean: usize,
    pub correct_corrupt: usize,
    pub hash_before: String,
    pub hash_after: String,
}

/// Linear classifier `x·W + b`.
struct Head {
    store: ParamStore,
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    fn new(k: usize, classes: usize) -> Self {
        let mut store = ParamStore::new();
        let weight = store.add("head.weight", Tensor::zeros(&[k, classes]), true);
        let bias = store.add("head.bias", Tensor::zeros(&[classes]), false);
        Self { store, weight, bias }
    }

    fn predict(&self, feats: &[f64], k: usize) -> Vec<usize> {
        let w = self.store.get(self.weight).value.data();
        let b = self.store.get(self.bias).value.data();
        let l = b.len();
        feats
            .chunks(k)
            .map(|x| {
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..l {
                    let z = b[c] + (0..k).map(|j| x[j] * w[j * l + c]).sum::<f64>();
                    if z > best.1 {
                        best = (c, z);
                    }
                }
                best.0
            })
            .collect()
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> (usize, f64) {
    let c = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    (c, c as f64 / labels.len().max(1) as f64)
}

fn check_labels(train: &SyntheticDataset, test: &SyntheticDataset, classes: usize) -> Result<()> {
    if train.spec.classes != classes || test.spec.classes != classes {
        return Err(TrainError::Config(format!(
            "label count mismatch: config {classes}, train {}, test {}",
            train.spec.classes, test.spec.classes
        )));
    }
    if train.labels.iter().chain(&test.labels).any(|&l| l >= classes) {
        return Err(TrainError::Config(format!("label outside 0..{classes}")));
    }
    Ok(())
}

/// Standardise columns with the training mean / std.
fn standardise(train: &mut [f64], others: &mut [&mut Vec<f64>], k: usize) {
    let n = (train.len() / k).max(1) as f64;
    let mut mean = vec![0.0; k];
    for row in train.chunks(k) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut sd = vec![0.0; k];
    for row in train.chunks(k) {
        for ((s, x), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (x - m).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    for buf in std::iter::once(train).chain(others.iter_mut().map(|v| v.as_mut_slice())) {
        for row in buf.chunks_mut(k) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
                *x = (*x - m) / s;
            }
        }
    }
}

fn fit_head(head: &mut Head, feats: &[f64], labels: &[usize], k: usize, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let sch = &cfg.probe;
    let n = labels.len();
    let mut os = OptimState::new(
        &head.store,
        CosineSchedule {
            base_lr: sch.lr,
            total_steps: (steps_per_epoch(n, sch.batch) * sch.epochs) as u64,
        },
    );
    let opt = AdamW {
        weight_decay: sch.weight_decay,
        ..AdamW::default()
    };
    for epoch in 0..sch.epochs {
        let mut rng = Rng::for_purpose(seed, Stream::Probe, epoch as u64);
        for idx in epoch_batches(n, sch.batch, &mut rng) {
            let x: Vec<f64> = idx.iter().flat_map(|&i| feats[i * k..(i + 1) * k].iter().copied()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let b = g.bind(&head.store, true)?;
            let xv = g.constant(Tensor::new(vec![idx.len(), k], x)?)?;
            let z = g.matmul(xv, b.get(head.weight))?;
            let z = g.add(z, b.get(head.bias))?;
            let loss = g.cross_entropy(z, &y)?;
            g.backward(loss)?;
            opt.step(&mut head.store, &g.param_grads(&b), &mut os)?;
        }
    }
    Ok(())
}

fn eval_sets(cfg: &ExperimentConfig, seed: u64, test: &SyntheticDataset, exec: ExecMode) -> Result<SyntheticDataset> {
    let spec = CorruptionSpec {
        kinds: cfg.corruption.kinds.clone(),
        severity: cfg.eval_severity,
        apply_prob: 1.0,
    };
    Ok(test.corrupted(&spec, seed, EVAL_CORRUPTION_TAG, exec)?)
}

/// Train a linear head on mean-pooled features of the frozen encoder, then
/// score it on the clean and the fully corrupted test split.
///
/// Probe-training images are corrupted once with the training corruption
/// settings; features are computed a single time and standardised with
/// training statistics.
pub fn linear_probe(
    cfg: &ExperimentConfig,
    vit: &Vit,
    seed: u64,
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    exec: ExecMode,
) -> Result<ProbeResult> {
    cfg.validate().map_err(TrainError::Config)?;
    check_labels(train, test, cfg.data.classes)?;
    let hash_before = encoder_fingerprint(vit);
    let k = vit.cfg.dim;
    let tr = train.corrupted(&cfg.corruption, seed, PROBE_CORRUPTION_TAG, exec)?;
    let bad = eval_sets(cfg, seed, test, exec)?;
    let feats = |d: &SyntheticDataset, tag: u64| extract_features(vit, d, cfg.test_noise, seed, tag, cfg.shard, exec);
    let mut f_train = feats(&tr, 0)?;
    let mut f_clean = feats(test, 1)?;
    let mut f_bad = feats(&bad, 2)?;
    standardise(&mut f_train, &mut [&mut f_clean, &mut f_bad], k);

    let mut head = Head::new(k, cfg.data.classes);
    fit_head(&mut head, &f_train, &tr.labels, k, cfg, seed)?;
    let (_, train_acc) = accuracy(&head.predict(&f_train, k), &tr.labels);
    let (correct_clean, clean_acc) = accuracy(&head.predict(&f_clean, k), &test.labels);
    let (correct_corrupt, corrupt_acc) = accuracy(&head.predict(&f_bad, k), &test.labels);
    Ok(ProbeResult {
        clean_acc,
        corrupt_acc,
        train_acc,
        n_test: test.len(),
        correct_clean,
        correct_corrupt,
        hash_after: encoder_fingerprint(vit),
        hash_before,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SupervisedResult {
    pub clean_acc: f64,
    pub corrupt_acc: f64,
    pub epoch_loss: Vec<f64>,
    pub params: usize,
}

struct SupShard {
    vit_grads: Vec<Vec<f64>>,
    head_grads: Vec<Vec<f64>>,
    ce: f64,
    recon: Vec<f64>,
}

fn supervised_shard(vit: &Vit, head: &Head, images: &Tensor, labels: &[usize], mut noise: Rng, weight: f64) -> Result<SupShard> {
    let patches = patchify(images, vit.cfg.patch)?;
    let all = vec![(0..vit.cfg.tokens()).collect::<Vec<_>>(); labels.len()];
    let mut g = Graph::new();
    let b = g.bind(&vit.store, true)?;
    let hb = g.bind(&head.store, true)?;
    let (x, traces) = vit.encode(&mut g, &b, &patches, &all, TbmNoise::Sample(&mut noise))?;
    let x = g.mean_axis(x, 1)?;
    let z = g.matmul(x, hb.get(head.weight))?;
    let z = g.add(z, hb.get(head.bias))?;
    let ce = g.cross_entropy(z, labels)?;
    let mut total = ce;
    let mut recon = Vec::new();
    for (tr, st) in traces.iter().zip(&vit.tbms) {
        let r = tbm_recon_loss(&mut g, tr.f, tr.f_hat, st.lambda)?;
        recon.push(g.value(r).item());
        total = g.add(total, r)?;
    }
    let scaled = g.scale(total, weight)?;
    g.backward(scaled)?;
    Ok(SupShard {
        vit_grads: g.param_grads(&b),
        head_grads: g.param_grads(&hb),
        ce: g.value(ce).item(),
        recon,
    })
}

/// Gradient of the supervised loss (cross-entropy plus TBM reconstruction)
/// on one batch with respect to every model parameter, and the loss value.
pub fn supervised_grads(vit: &Vit, images: &Tensor, labels: &[usize], classes: usize, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let head = Head::new(vit.cfg.dim, classes);
    let s = supervised_shard(vit, &head, images, labels, Rng::for_purpose(seed, Stream::TbmNoise, 0), 1.0)?;
    Ok((s.ce + s.recon.iter().sum::<f64>(), s.vit_grads))
}

/// End-to-end training of encoder, TBMs and a linear head on mean-pooled
/// tokens with cross-entropy plus `λ`-weighted TBM reconstruction losses.
pub fn supervised_train(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    out: Option<&Path>,
    exec: ExecMode,
) -> Result<SupervisedResult> {
    cfg.validate().map_err(TrainError::Config)?;
    check_labels(train, test, cfg.data.classes)?;
    let sch = &cfg.supervised;
    let n = train.len();
    let per_epoch = steps_per_epoch(n, sch.batch);
    let schedule = CosineSchedule {
        base_lr: sch.lr,
        total_steps: (per_epoch * sch.epochs) as u64,
    };
    let opt = AdamW {
        weight_decay: sch.weight_decay,
        ..AdamW::default()
    };
    let mut vit = Vit::new(cfg.encoder.clone(), cfg.lambda, seed)?;
    vit.mc_samples = cfg.mc_samples;
    let mut head = Head::new(cfg.encoder.dim, cfg.data.classes);
    let mut os = OptimState::new(&vit.store, schedule);
    let mut hs = OptimState::new(&head.store, schedule);
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsLog::open(&dir.join("metrics.ndjson"), seed, None)?)
        }
        None => None,
    };
    let mut epoch_loss = Vec::new();
    for epoch in 0..sch.epochs {
        let data = train.corrupted(&cfg.corruption, seed, epoch as u64, exec)?;
        let mut srng = Rng::for_purpose(seed, Stream::Shuffle, epoch as u64);
        let batches = epoch_batches(n, sch.batch, &mut srng);
        if epoch == 0 && cfg.alpha_init == AlphaInit::Warmup {
            warmup_alpha(&mut vit, &data.batch(&batches[0]))?;
        }
        let mut sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let step = (epoch * per_epoch + bi) as u64;
            let groups = shards(idx, cfg.shard);
            let bsz = idx.len() as f64;
            let outs = exec.map(groups.iter().cloned().enumerate().collect(), |(si, ids)| {
                let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
                let noise = Rng::for_purpose(seed, Stream::TbmNoise, (step << 16) | si as u64);
                supervised_shard(&vit, &head, &data.batch(&ids), &labels, noise, ids.len() as f64 / bsz)
            });
            let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
            let mut ce = 0.0;
            let mut recon = vec![0.0; vit.tbms.len()];
            for (o, ids) in outs.iter().zip(&groups) {
                let w = ids.len() as f64 / bsz;
                ce += w * o.ce;
                for (r, v) in recon.iter_mut().zip(&o.recon) {
                    *r += w * v;
                }
            }
            let mut total = ce;
            for r in &recon {
                total += r;
            }
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    metric: "total_loss".into(),
                    snapshot: out.map(|d| d.join("metrics.ndjson")).unwrap_or_default(),
                });
            }
            let (vg, hg): (Vec<_>, Vec<_>) = outs.into_iter().map(|o| (o.vit_grads, o.head_grads)).unzip();
            opt.step(&mut vit.store, &reduce_grads(vg), &mut os)?;
            opt.step(&mut head.store, &reduce_grads(hg), &mut hs)?;
            if let Some(l) = log.as_mut() {
                l.log(step, epoch, "ce_loss", ce)?;
                for (st, r) in vit.tbms.iter().zip(&recon) {
                    l.log(step, epoch, &format!("recon_loss.{}", st.name), *r)?;
                }
                l.log(step, epoch, "total_loss", total)?;
            }
            sum += total;
        }
        epoch_loss.push(sum / batches.len() as f64);
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
    }
    let k = cfg.encoder.dim;
    let bad = eval_sets(cfg, seed, test, exec)?;
    let f_clean = extract_features(&vit, test, cfg.test_noise, seed, 1, cfg.shard, exec)?;
    let f_bad = extract_features(&vit, &bad, cfg.test_noise, seed, 2, cfg.shard, exec)?;
    let (_, clean_acc) = accuracy(&head.predict(&f_clean, k), &test.labels);
    let (_, corrupt_acc) = accuracy(&head.predict(&f_bad, k), &test.labels);
    Ok(SupervisedResult {
        clean_acc,
        corrupt_acc,
        epoch_loss,
        params: vit.store.numel() + head.store.numel(),
    })
}
