use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use token_boost::data::{CorruptionSpec, Severity, EVAL_CORRUPTION_TAG};
use token_boost::exec::ExecMode;
use token_boost::tensor::read_container;
use token_boost::theory::{run_suite, SuiteConfig};
use token_boost::train::{
    self, default_cells, linear_probe, load_checkpoint, read_metrics, stats, supervised_train, write_results_csv,
    ExperimentConfig, PretrainOptions,
};
use token_boost::vt::Vit;

use crate::manifest::{DirLock, ParamCounts, ParamEntry, RunManifest};
use crate::{Common, UsageError, VerificationFailed};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exec(c: &Common) -> ExecMode {
    if c.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Defaults ← `base` ← `--config` ← `--set` ← dedicated flags.
fn resolve(c: &Common, base: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(b) = base {
        cfg.apply_text(b).map_err(|e| usage(format!("embedded config: {e}")))?;
    }
    if let Ok(root) = std::env::var("TOKEN_BOOST_OUT") {
        cfg.out = PathBuf::from(root);
    }
    if let Some(p) = &c.config {
        let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(k) = &c.corruptions {
        cfg.set("corruption.kinds", k).map_err(usage)?;
    }
    if let Some(s) = &c.severity {
        cfg.set("corruption.severity", s).map_err(usage)?;
    }
    if let Some(p) = c.apply_prob {
        cfg.corruption.apply_prob = p;
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn param_info(cfg: &ExperimentConfig) -> Result<(ParamCounts, Vec<ParamEntry>)> {
    let vit = Vit::new(cfg.encoder.clone(), cfg.lambda, 0)?;
    let (base, tbm) = vit.param_counts();
    let entries = vit
        .store
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    Ok((
        ParamCounts {
            with_tbm: base + tbm,
            without_tbm: base,
            tbm,
        },
        entries,
    ))
}

fn start(cmd: &str, cfg: &ExperimentConfig) -> Result<(DirLock, RunManifest)> {
    let lock = DirLock::acquire(&cfg.out)?;
    let mut m = RunManifest::new(cmd, cfg.to_text(), cfg.seeds.clone());
    let (counts, params) = param_info(cfg)?;
    m.param_counts = Some(counts);
    m.parameters = params;
    m.write(&cfg.out)?;
    Ok((lock, m))
}

/// Run `body`, then finalise the manifest with the outcome.
fn with_manifest(cfg: &ExperimentConfig, m: &mut RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    let r = body(m);
    let fin = m.finish(&cfg.out, r.is_ok());
    r.and(fin)
}

#[derive(Serialize)]
struct PlotRow<'a> {
    x: f64,
    series: &'a str,
    value: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

pub fn pretrain(c: &Common, resume: bool, halt_after: Option<usize>) -> Result<()> {
    let cfg = resolve(c, None)?;
    for &seed in &cfg.seeds {
        let metrics = cfg.out.join(format!("seed-{seed}")).join("metrics.ndjson");
        if !resume && metrics.exists() {
            return Err(usage(format!("{} exists; pass --resume or choose another --out", metrics.display())));
        }
    }
    let (_lock, mut m) = start("pretrain", &cfg)?;
    let ex = exec(c);
    with_manifest(&cfg, &mut m, |m| {
        let (tr, _) = train::datasets(&cfg, ex)?;
        let mut finals = serde_json::Map::new();
        for &seed in &cfg.seeds {
            let dir = cfg.out.join(format!("seed-{seed}"));
            let opts = PretrainOptions { resume, halt_after };
            let out = train::pretrain(&cfg, seed, &tr, &dir, &opts, ex)?;
            m.add_artifact(&cfg.out, &out.metrics);
            m.add_artifact(&cfg.out, &out.checkpoint);
            let recs = read_metrics(&out.metrics)?;
            let plot = dir.join("plot_loss.csv");
            write_csv(
                &plot,
                recs.iter()
                    .filter(|r| r.metric.ends_with("loss") && !r.metric.starts_with("epoch_"))
                    .map(|r| PlotRow {
                        x: r.step as f64,
                        series: &r.metric,
                        value: r.value,
                    }),
            )?;
            m.add_artifact(&cfg.out, &plot);
            let last = recs.iter().rev().find(|r| r.metric == "epoch_mae_loss").map(|r| r.value);
            finals.insert(seed.to_string(), json!({ "final_epoch_mae_loss": last }));
            println!("seed {seed}: {} epochs, final mae {:?} -> {}", out.epochs_done, last, out.checkpoint.display());
            m.write(&cfg.out)?;
        }
        m.extra = serde_json::Value::Object(finals);
        Ok(())
    })
}

pub fn probe(c: &Common, ckpt: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt).map_err(|e| usage(format!("cannot load checkpoint: {e}")))?;
    let base = ck.meta["config"].as_str().map(str::to_owned);
    let mut common = c.clone();
    if common.seed.is_none() {
        common.seed = ck.meta["seed"].as_u64();
    }
    let mut cfg = resolve(&common, base.as_deref())?;
    if common.out.is_none() && std::env::var("TOKEN_BOOST_OUT").is_err() {
        cfg.out = ckpt.parent().unwrap_or(Path::new(".")).join("probe");
    }
    cfg.encoder = ck.vit.cfg.clone();
    let (_lock, mut m) = start("probe", &cfg)?;
    m.extra = json!({ "checkpoint": ckpt.display().to_string() });
    let ex = exec(c);
    with_manifest(&cfg.clone(), &mut m, |m| {
        let (tr, te) = train::datasets(&cfg, ex)?;
        let seed = cfg.seeds[0];
        let r = linear_probe(&cfg, &ck.vit, seed, &tr, &te, ex)?;
        let p = cfg.out.join("probe.json");
        write_json(&p, &r)?;
        m.add_artifact(&cfg.out, &p);
        println!(
            "clean {:.4}  corrupted {:.4}  (encoder hash {})",
            r.clean_acc,
            r.corrupt_acc,
            if r.hash_before == r.hash_after { "unchanged" } else { "CHANGED" }
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct SeedAcc {
    seed: u64,
    clean_acc: f64,
    corrupt_acc: f64,
}

pub fn supervised(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    let (_lock, mut m) = start("supervised", &cfg)?;
    let ex = exec(c);
    with_manifest(&cfg, &mut m, |m| {
        let (tr, te) = train::datasets(&cfg, ex)?;
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            let dir = cfg.out.join(format!("seed-{seed}"));
            let r = supervised_train(&cfg, seed, &tr, &te, Some(&dir), ex)?;
            m.add_artifact(&cfg.out, &dir.join("metrics.ndjson"));
            println!("seed {seed}: clean {:.4} corrupted {:.4}", r.clean_acc, r.corrupt_acc);
            rows.push(SeedAcc {
                seed,
                clean_acc: r.clean_acc,
                corrupt_acc: r.corrupt_acc,
            });
        }
        let p = cfg.out.join("supervised.csv");
        write_csv(&p, &rows)?;
        m.add_artifact(&cfg.out, &p);
        Ok(())
    })
}

pub fn ablate(c: &Common, names: &[String]) -> Result<()> {
    let cfg = resolve(c, None)?;
    let all = default_cells(cfg.encoder.depth);
    let cells: Vec<_> = if names.is_empty() {
        all
    } else {
        let known: Vec<&str> = all.iter().map(|x| x.name.as_str()).collect();
        if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
            return Err(usage(format!("unknown cell `{bad}`; known: {}", known.join(","))));
        }
        all.into_iter().filter(|x| names.contains(&x.name)).collect()
    };
    let (_lock, mut m) = start("ablate", &cfg)?;
    m.extra = json!({ "cells": cells });
    let ex = exec(c);
    with_manifest(&cfg, &mut m, |m| {
        let table = train::ablate(&cfg, &cells, &cfg.out, ex)?;
        write_results_csv(&table, &cfg.out)?;
        for f in ["results.csv", "summary.csv", "plot_accuracy.csv"] {
            m.add_artifact(&cfg.out, &cfg.out.join(f));
        }
        let mut comparisons = Vec::new();
        for (a, b) in [("lambda_1", "baseline"), ("lambda_1", "lambda_0"), ("lambda_1", "top"), ("lambda_1", "mid"), ("lambda_1", "bottom")] {
            if cells.iter().any(|x| x.name == a) && cells.iter().any(|x| x.name == b) {
                let (ac, bc, ak, bk) = table.paired(a, b);
                comparisons.push(json!({
                    "a": a, "b": b,
                    "corrupt": stats::paired_t_test(&ak, &bk),
                    "clean": stats::paired_t_test(&ac, &bc),
                    "pooled_std_corrupt": stats::pooled_std(&ak, &bk),
                    "pooled_std_clean": stats::pooled_std(&ac, &bc),
                }));
            }
        }
        let p = cfg.out.join("ablation_stats.json");
        write_json(&p, &json!({ "summary": table.summary(), "comparisons": comparisons }))?;
        m.add_artifact(&cfg.out, &p);
        for s in table.summary() {
            println!(
                "{:<12} n={} clean {:.4}±{:.4} corrupted {:.4}±{:.4}{}",
                s.cell,
                s.n,
                s.clean_mean,
                s.clean_std,
                s.corrupt_mean,
                s.corrupt_std,
                if s.failures > 0 { format!(" ({} failed)", s.failures) } else { String::new() }
            );
        }
        for r in table.runs.iter().filter(|r| r.result.is_err()) {
            eprintln!("cell {} seed {} failed: {}", r.cell, r.seed, r.result.as_ref().unwrap_err());
        }
        Ok(())
    })
}

fn parse_count(s: &str) -> Result<usize> {
    let v: f64 = s.parse().map_err(|_| usage(format!("--samples: not a number: `{s}`")))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v < 1e12) {
        return Err(usage(format!("--samples must be a positive integer, got `{s}`")));
    }
    Ok(v as usize)
}

pub fn verify_theory(c: &Common, samples: &str, bins: usize, alpha_steps: usize, diagnostics: bool) -> Result<()> {
    let n = parse_count(samples)?;
    if bins < 2 {
        return Err(usage("--bins must be at least 2"));
    }
    let mut cfg = resolve(c, None)?;
    if c.out.is_none() && std::env::var("TOKEN_BOOST_OUT").is_err() {
        cfg.out = PathBuf::from("runs/theory");
    }
    let suite = SuiteConfig {
        samples: n,
        bins,
        seed: c.seed.unwrap_or(0),
        alpha_steps,
        diagnostics,
    };
    let lock = DirLock::acquire(&cfg.out)?;
    let mut m = RunManifest::new("verify-theory", cfg.to_text(), vec![suite.seed]);
    m.extra = serde_json::to_value(&suite)?;
    m.write(&cfg.out)?;
    let ex = exec(c);
    let out = cfg.out.clone();
    let res = with_manifest(&cfg, &mut m, |m| {
        let report = run_suite(&suite, ex)?;
        let p = out.join("theory_report.json");
        write_json(&p, &report)?;
        m.add_artifact(&out, &p);
        let p = out.join("theory.csv");
        write_csv(&p, report.csv_rows())?;
        m.add_artifact(&out, &p);
        let p = out.join("plot_alpha.csv");
        let series = [
            ("alpha_uniform", &report.alpha_uniform),
            ("alpha_heterogeneous", &report.alpha_heterogeneous),
            ("alpha_zero", &report.alpha_zero),
        ];
        let mut rows = Vec::new();
        for (name, r) in series {
            for &(step, a) in &r.trajectory {
                rows.push(PlotRow {
                    x: step as f64,
                    series: name,
                    value: a,
                });
            }
        }
        write_csv(&p, rows)?;
        m.add_artifact(&out, &p);
        for ch in &report.checks {
            println!("{} {:<44} {}", if ch.pass { "PASS" } else { "FAIL" }, ch.name, ch.detail);
        }
        if let Some(s) = &report.alpha_strict {
            println!("info strict-module alpha: mean {:.4} (omega 0.5), reported only", s.mean_alpha);
        }
        if let Some(l) = &report.learned_boost {
            println!(
                "info learned boost MSE {:.4} (corrupted {:.4}, ideal {:.4}), reported only",
                l.mse_learned_boost, l.mse_corrupted_input, l.mse_ideal_boost
            );
        }
        if report.pass {
            Ok(())
        } else {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            Err(VerificationFailed(format!("theory checks failed: {}", failed.join(","))).into())
        }
    });
    drop(lock);
    res
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    let lock = DirLock::acquire(&cfg.out)?;
    let mut m = RunManifest::new("gen-data", cfg.to_text(), vec![cfg.data.seed]);
    m.write(&cfg.out)?;
    let ex = exec(c);
    let res = with_manifest(&cfg, &mut m, |m| {
        let (tr, te) = train::datasets(&cfg, ex)?;
        let spec = CorruptionSpec {
            kinds: cfg.corruption.kinds.clone(),
            severity: cfg.eval_severity,
            apply_prob: 1.0,
        };
        let bad = te.corrupted(&spec, cfg.seeds[0], EVAL_CORRUPTION_TAG, ex)?;
        for (name, d) in [("train.tbk", &tr), ("test.tbk", &te), ("test_corrupted.tbk", &bad)] {
            let p = cfg.out.join(name);
            d.save(&p)?;
            m.add_artifact(&cfg.out, &p);
        }
        println!(
            "{} train / {} test images, {} classes, severity {} -> {}",
            tr.len(),
            te.len(),
            cfg.data.classes,
            match spec.severity {
                Severity::Uniform => "uniform".to_string(),
                Severity::Fixed(l) => l.to_string(),
            },
            cfg.out.display()
        );
        Ok(())
    });
    drop(lock);
    res
}

pub fn inspect_ckpt(path: &Path, all: bool, as_json: bool) -> Result<()> {
    let c = read_container(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let entries: Vec<_> = c
        .entries()
        .into_iter()
        .filter(|e| all || !e.name.starts_with("optim."))
        .collect();
    let mut out = std::io::stdout().lock();
    let r = (|| -> std::io::Result<()> {
        if as_json {
            let v = json!({
                "meta": c.meta,
                "tensors": entries.iter().map(|e| json!({ "name": e.name, "shape": e.shape })).collect::<Vec<_>>(),
            });
            return writeln!(out, "{}", serde_json::to_string_pretty(&v)?);
        }
        for k in ["kind", "format", "regime", "seed", "epoch", "lambda"] {
            if let Some(v) = c.meta.get(k) {
                writeln!(out, "# {k}: {v}")?;
            }
        }
        for e in &entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            writeln!(out, "{}\t[{}]", e.name, dims.join(","))?;
        }
        out.flush()
    })();
    match r {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
