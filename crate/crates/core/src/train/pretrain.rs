use std::path::{Path, PathBuf};

use serde_json::json;

use super::metrics::MetricsLog;
use super::{epoch_batches, reduce_grads, shards, steps_per_epoch, AlphaInit, ExperimentConfig, Result, TrainError};
use crate::data::SyntheticDataset;
use crate::exec::ExecMode;
use crate::tbm::{alpha_effective, tbm_recon_loss};
use crate::tensor::{read_container, write_container, AdamW, Container, CosineSchedule, Graph, OptimState, Rng, Stream, Tensor, TensorError};
use crate::vt::{gather_tokens, mae_loss, patchify, sample_mask, EncoderConfig, MaskPlan, TbmNoise, Vit};

pub const FINAL_CHECKPOINT: &str = "final.tbk";
const FORMAT: &str = "token-boost/v1";

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Continue from the newest epoch checkpoint in the output directory.
    pub resume: bool,
    /// Stop (cleanly, after checkpointing) once this many epochs are done.
    pub halt_after: Option<usize>,
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub vit: Vit,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Mean training MAE loss per completed epoch of this invocation.
    pub epoch_mae: Vec<f64>,
    /// Epochs completed overall (less than configured if halted).
    pub epochs_done: usize,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub vit: Vit,
    pub optim: Option<OptimState>,
    pub meta: serde_json::Value,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-epoch-{epoch:04}.tbk"))
}

/// The newest `ckpt-epoch-*.tbk` in `dir`, with its epoch.
pub fn latest_checkpoint(dir: &Path) -> std::io::Result<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name.strip_prefix("ckpt-epoch-").and_then(|r| r.strip_suffix(".tbk")) {
            if let Ok(ep) = n.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| ep > *b) {
                    best = Some((ep, p));
                }
            }
        }
    }
    Ok(best)
}

/// Write parameters (and optionally optimizer moments) plus `meta`.
pub fn save_checkpoint(path: &Path, vit: &Vit, optim: Option<&OptimState>, mut meta: serde_json::Value) -> Result<()> {
    meta["format"] = json!(FORMAT);
    meta["encoder"] = serde_json::to_value(&vit.cfg).expect("serialisable");
    meta["lambda"] = json!(vit.tbms.first().map_or(0.0, |t| t.lambda));
    let mut c = Container::new(meta);
    for p in vit.store.iter() {
        c.push(p.name.clone(), p.value.clone());
    }
    if let Some(o) = optim {
        c.meta["optim"] = json!({ "step": o.step, "schedule": o.schedule });
        for (p, (m, v)) in vit.store.iter().zip(o.m.iter().zip(&o.v)) {
            c.push(format!("optim.m/{}", p.name), Tensor::new(p.value.shape().to_vec(), m.clone())?);
            c.push(format!("optim.v/{}", p.name), Tensor::new(p.value.shape().to_vec(), v.clone())?);
        }
    }
    write_container(path, &c)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read_container(path)?;
    let bad = |m: String| TrainError::Checkpoint(format!("{}: {m}", path.display()));
    if c.meta["format"] != FORMAT {
        return Err(bad(format!("unknown format {}", c.meta["format"])));
    }
    let cfg: EncoderConfig = serde_json::from_value(c.meta["encoder"].clone()).map_err(|e| bad(e.to_string()))?;
    let lambda = c.meta["lambda"].as_f64().unwrap_or(0.0);
    let mut vit = Vit::new(cfg, lambda, 0)?;
    for p in vit.store.iter_mut() {
        let t = c.get(&p.name).ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(bad(format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t.clone();
    }
    let optim = match c.meta.get("optim") {
        Some(o) => {
            let schedule = serde_json::from_value(o["schedule"].clone()).map_err(|e| bad(e.to_string()))?;
            let mut st = OptimState::new(&vit.store, schedule);
            st.step = o["step"].as_u64().ok_or_else(|| bad("optimizer step".into()))?;
            for (i, p) in vit.store.iter().enumerate() {
                let get = |k: &str| {
                    c.get(&format!("{k}/{}", p.name))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| bad(format!("missing {k} for {}", p.name)))
                };
                st.m[i] = get("optim.m")?;
                st.v[i] = get("optim.v")?;
            }
            Some(st)
        }
        None => None,
    };
    Ok(Checkpoint {
        vit,
        optim,
        meta: c.meta,
    })
}

struct ShardOut {
    grads: Vec<Vec<f64>>,
    mae: f64,
    recon: Vec<f64>,
}

/// Forward + backward of the pre-training loss on one shard, scaled by
/// `weight` (the shard's share of the batch).
fn pretrain_shard(vit: &Vit, images: &Tensor, plans: &[MaskPlan], mut noise: Rng, weight: f64) -> Result<ShardOut> {
    let patches = patchify(images, vit.cfg.patch)?;
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
    let mut g = Graph::new();
    let b = g.bind(&vit.store, true)?;
    let (latent, traces) = vit.encode(&mut g, &b, &patches, &visible, TbmNoise::Sample(&mut noise))?;
    let pred = vit.decode(&mut g, &b, latent, plans)?;
    let target = g.constant(gather_tokens(&patches, &masked)?)?;
    let mae = mae_loss(&mut g, pred, target)?;
    let mut total = mae;
    let mut recon = Vec::with_capacity(traces.len());
    for (tr, st) in traces.iter().zip(&vit.tbms) {
        let r = tbm_recon_loss(&mut g, tr.f, tr.f_hat, st.lambda)?;
        recon.push(g.value(r).item());
        total = g.add(total, r)?;
    }
    let scaled = g.scale(total, weight)?;
    g.backward(scaled)?;
    Ok(ShardOut {
        grads: g.param_grads(&b),
        mae: g.value(mae).item(),
        recon,
    })
}

/// `alpha_raw ← 0.1·std` of each TBM input over one batch (all tokens
/// visible, no synthetic noise since α starts at zero).
pub(crate) fn warmup_alpha(vit: &mut Vit, images: &Tensor) -> Result<()> {
    if vit.tbms.is_empty() {
        return Ok(());
    }
    let patches = patchify(images, vit.cfg.patch)?;
    let all: Vec<Vec<usize>> = vec![(0..vit.cfg.tokens()).collect(); images.shape()[0]];
    let mut g = Graph::new();
    let b = g.bind(&vit.store, false)?;
    let (_, traces) = vit.encode(&mut g, &b, &patches, &all, TbmNoise::Mean)?;
    let feats: Vec<Tensor> = traces.iter().map(|t| g.value(t.f).clone()).collect();
    for (st, f) in vit.tbms.iter().zip(&feats) {
        st.init_alpha(&mut vit.store, f)?;
    }
    Ok(())
}

fn snapshot(out: &Path, step: u64, epoch: usize, vit: &Vit, what: &str, values: serde_json::Value) -> PathBuf {
    let p = out.join("diagnostic.json");
    let alpha: Vec<Vec<f64>> = vit.tbms.iter().map(|t| alpha_effective(&vit.store, t)).collect();
    let body = json!({ "step": step, "epoch": epoch, "metric": what, "values": values, "alpha_effective": alpha });
    let _ = std::fs::write(&p, serde_json::to_string_pretty(&body).unwrap_or_default());
    let _ = save_checkpoint(&out.join("diagnostic.tbk"), vit, None, json!({ "kind": "diagnostic", "step": step }));
    p
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Masked-autoencoder pre-training of one seed into `out`.
///
/// Each step logs `mae_loss`, `recon_loss.<layer>` (already scaled by `λ`),
/// `total_loss = mae_loss + Σ recon` (summed in layer order) and `lr`; each
/// epoch adds `epoch_mae_loss`, `alpha_norm.<layer>` and `alpha_mean.<layer>`.
/// Every `checkpoint_every` epochs (and at the end) parameters and optimizer
/// state are saved; all randomness is keyed by `(seed, epoch, step)`, so a
/// resumed run reproduces an uninterrupted one bit for bit.
pub fn pretrain(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &SyntheticDataset,
    out: &Path,
    opts: &PretrainOptions,
    exec: ExecMode,
) -> Result<PretrainOutput> {
    cfg.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(out)?;
    let sch = &cfg.pretrain;
    let n = train.len();
    let per_epoch = steps_per_epoch(n, sch.batch);
    let total_steps = (per_epoch * sch.epochs) as u64;
    let schedule = CosineSchedule {
        base_lr: sch.lr,
        total_steps,
    };
    let opt = AdamW {
        weight_decay: sch.weight_decay,
        ..AdamW::default()
    };
    let metrics_path = out.join("metrics.ndjson");

    let resumed = if opts.resume { latest_checkpoint(out)? } else { None };
    let (mut vit, mut os, start_epoch, mut log) = match resumed {
        Some((epoch, path)) => {
            let ck = load_checkpoint(&path)?;
            let os = ck.optim.ok_or_else(|| TrainError::Checkpoint(format!("{} has no optimizer state", path.display())))?;
            if ck.meta["seed"].as_u64() != Some(seed) || ck.vit.cfg != cfg.encoder {
                return Err(TrainError::Checkpoint(format!("{} belongs to a different run", path.display())));
            }
            // Anything but the seed list and output root must be unchanged,
            // otherwise the continuation would silently be a different run.
            let mut saved = ck.meta["config"]
                .as_str()
                .map(ExperimentConfig::parse)
                .transpose()
                .map_err(|e| TrainError::Checkpoint(format!("{}: embedded config: {e}", path.display())))?
                .ok_or_else(|| TrainError::Checkpoint(format!("{} has no embedded config", path.display())))?;
            saved.seeds.clone_from(&cfg.seeds);
            saved.out.clone_from(&cfg.out);
            if saved.to_text() != cfg.to_text() {
                return Err(TrainError::Config(format!(
                    "resume with a configuration that differs from {}",
                    path.display()
                )));
            }
            let records = ck.meta["metrics_records"].as_u64().unwrap_or(0) as usize;
            let mut vit = ck.vit;
            vit.set_lambda(cfg.lambda);
            vit.mc_samples = cfg.mc_samples;
            (vit, os, epoch, MetricsLog::open(&metrics_path, seed, Some(records))?)
        }
        None => {
            let mut vit = Vit::new(cfg.encoder.clone(), cfg.lambda, seed)?;
            vit.mc_samples = cfg.mc_samples;
            let os = OptimState::new(&vit.store, schedule);
            (vit, os, 0, MetricsLog::open(&metrics_path, seed, None)?)
        }
    };

    // Location-independent copy of the config, so a run's bytes do not
    // depend on where it was written.
    let portable = {
        let mut c = cfg.clone();
        c.seeds = vec![seed];
        c.out = ".".into();
        c.to_text()
    };
    let save = |vit: &Vit, os: &OptimState, epoch: usize, records: usize, path: &Path| {
        let meta = json!({
            "kind": "checkpoint",
            "regime": "pretrain",
            "seed": seed,
            "epoch": epoch,
            "metrics_records": records,
            "config": portable,
        });
        save_checkpoint(path, vit, Some(os), meta)
    };

    let t = cfg.encoder.tokens();
    let mut epoch_mae = Vec::new();
    let mut epoch = start_epoch;
    while epoch < sch.epochs {
        if opts.halt_after.is_some_and(|h| epoch >= h) {
            break;
        }
        let data = train.corrupted(&cfg.corruption, seed, epoch as u64, exec)?;
        let mut srng = Rng::for_purpose(seed, Stream::Shuffle, epoch as u64);
        let batches = epoch_batches(n, sch.batch, &mut srng);
        if epoch == 0 && cfg.alpha_init == AlphaInit::Warmup {
            warmup_alpha(&mut vit, &data.batch(&batches[0]))?;
        }
        let mut mae_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let step = (epoch * per_epoch + bi) as u64;
            let mut mrng = Rng::for_purpose(seed, Stream::Masking, step);
            let plans = idx
                .iter()
                .map(|_| sample_mask(t, cfg.mask_ratio, &mut mrng))
                .collect::<Result<Vec<_>, _>>()?;
            let groups = shards(&(0..idx.len()).collect::<Vec<_>>(), cfg.shard);
            let bsz = idx.len() as f64;
            let outs = exec.map(groups.iter().cloned().enumerate().collect(), |(si, rows)| {
                let ids: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
                let pl: Vec<MaskPlan> = rows.iter().map(|&r| plans[r].clone()).collect();
                let noise = Rng::for_purpose(seed, Stream::TbmNoise, (step << 16) | si as u64);
                pretrain_shard(&vit, &data.batch(&ids), &pl, noise, ids.len() as f64 / bsz)
            });
            let outs = match outs.into_iter().collect::<Result<Vec<_>>>() {
                Ok(o) => o,
                Err(TrainError::Tensor(e @ TensorError::NonFinite { .. })) => {
                    let snap = snapshot(out, step, epoch, &vit, "forward", json!({ "error": e.to_string() }));
                    return Err(TrainError::NonFinite {
                        step,
                        metric: e.to_string(),
                        snapshot: snap,
                    });
                }
                Err(e) => return Err(e),
            };
            let mut mae = 0.0;
            let mut recon = vec![0.0; vit.tbms.len()];
            for (o, rows) in outs.iter().zip(&groups) {
                let w = rows.len() as f64 / bsz;
                mae += w * o.mae;
                for (r, v) in recon.iter_mut().zip(&o.recon) {
                    *r += w * v;
                }
            }
            let mut total = mae;
            for r in &recon {
                total += r;
            }
            if !total.is_finite() {
                let snap = snapshot(out, step, epoch, &vit, "total_loss", json!({ "mae": mae, "recon": recon }));
                return Err(TrainError::NonFinite {
                    step,
                    metric: "total_loss".into(),
                    snapshot: snap,
                });
            }
            let grads = reduce_grads(outs.into_iter().map(|o| o.grads).collect());
            let lr = match opt.step(&mut vit.store, &grads, &mut os) {
                Ok(lr) => lr,
                Err(e) => {
                    let snap = snapshot(out, step, epoch, &vit, "gradient", json!({ "error": e.to_string() }));
                    return Err(TrainError::NonFinite {
                        step,
                        metric: e.to_string(),
                        snapshot: snap,
                    });
                }
            };
            log.log(step, epoch, "mae_loss", mae)?;
            for (st, r) in vit.tbms.iter().zip(&recon) {
                log.log(step, epoch, &format!("recon_loss.{}", st.name), *r)?;
            }
            log.log(step, epoch, "total_loss", total)?;
            log.log(step, epoch, "lr", lr)?;
            mae_sum += mae;
        }
        let last = ((epoch + 1) * per_epoch - 1) as u64;
        let em = mae_sum / batches.len() as f64;
        epoch_mae.push(em);
        log.log(last, epoch, "epoch_mae_loss", em)?;
        for st in &vit.tbms {
            let a = alpha_effective(&vit.store, st);
            log.log(last, epoch, &format!("alpha_norm.{}", st.name), l2(&a))?;
            log.log(last, epoch, &format!("alpha_mean.{}", st.name), a.iter().sum::<f64>() / a.len() as f64)?;
        }
        log.flush()?;
        epoch += 1;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 || epoch == sch.epochs || opts.halt_after == Some(epoch) {
            save(&vit, &os, epoch, log.count(), &checkpoint_path(out, epoch))?;
        }
    }
    let checkpoint = if epoch == sch.epochs {
        let p = out.join(FINAL_CHECKPOINT);
        save(&vit, &os, epoch, log.count(), &p)?;
        p
    } else {
        checkpoint_path(out, epoch)
    };
    Ok(PretrainOutput {
        vit,
        checkpoint,
        metrics: metrics_path,
        epoch_mae,
        epochs_done: epoch,
    })
}
