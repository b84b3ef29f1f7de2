//! Experiment configuration and its flat text format.
//!
//! Grammar, one assignment per line:
//!
//! ```text
//! # comment
//! key.sub = value        # trailing comments are allowed
//! ```
//!
//! Keys are dotted identifiers; values run to the end of the line (or to a
//! `#`) and are trimmed. Lists are comma-separated. Unknown keys are errors.
//! Assignments apply in order over [`ExperimentConfig::default`], so later
//! lines (and CLI overrides) win.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{CorruptionSpec, Severity};
use crate::tbm::EvalNoise;
use crate::vt::{EncoderConfig, TbmPlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrain,
    Probe,
    Supervised,
}

/// How `alpha_raw` starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInit {
    /// `0.1 · std` of each TBM's input over the first batch.
    Warmup,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    /// Datasets depend on this seed only, so runs with different seeds see
    /// the same images.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub lambda: f64,
    pub mc_samples: usize,
    pub test_noise: EvalNoise,
    pub alpha_init: AlphaInit,
    pub mask_ratio: f64,
    pub pretrain: Schedule,
    pub checkpoint_every: usize,
    pub probe: Schedule,
    pub supervised: Schedule,
    /// Training-time corruption.
    pub corruption: CorruptionSpec,
    /// Severity for the fully corrupted test copy.
    pub eval_severity: Severity,
    /// Images per gradient shard; shards are processed in parallel and
    /// reduced in order, so results do not depend on thread count.
    pub shard: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Pretrain,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
            data: DataConfig {
                n_train: 2048,
                n_test: 1000,
                classes: 10,
                seed: 0,
            },
            encoder: EncoderConfig::default(),
            lambda: 1.0,
            mc_samples: 1,
            test_noise: EvalNoise::Sample,
            alpha_init: AlphaInit::Warmup,
            mask_ratio: 0.75,
            pretrain: Schedule {
                epochs: 100,
                batch: 128,
                lr: 1e-3,
                weight_decay: 0.05,
            },
            checkpoint_every: 10,
            probe: Schedule {
                epochs: 100,
                batch: 256,
                lr: 1e-2,
                weight_decay: 0.0,
            },
            supervised: Schedule {
                epochs: 100,
                batch: 128,
                lr: 1e-3,
                weight_decay: 0.05,
            },
            corruption: CorruptionSpec::all(0.5),
            eval_severity: Severity::Uniform,
            shard: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    // Accept `1e6` for integer keys as well.
    if let Ok(x) = v.parse::<T>() {
        return Ok(x);
    }
    match v.parse::<f64>() {
        Ok(f) if f.fract() == 0.0 && f >= 0.0 => f.to_string().parse::<T>().map_err(|_| format!("{key}: bad number `{v}`")),
        _ => Err(format!("{key}: bad number `{v}`")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn severity_str(s: Severity) -> String {
    match s {
        Severity::Uniform => "uniform".into(),
        Severity::Fixed(l) => l.to_string(),
    }
}

fn parse_severity(key: &str, v: &str) -> Result<Severity, String> {
    if v == "uniform" {
        Ok(Severity::Uniform)
    } else {
        Ok(Severity::Fixed(num(key, v)?))
    }
}

impl ExperimentConfig {
    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Assign a single dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let e = &mut self.encoder;
        match key {
            "regime" => {
                self.regime = match v {
                    "pretrain" => Regime::Pretrain,
                    "probe" => Regime::Probe,
                    "supervised" => Regime::Supervised,
                    _ => return Err(format!("unknown regime `{v}`")),
                }
            }
            "seeds" => self.seeds = list(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.n_train" => self.data.n_train = num(key, v)?,
            "data.n_test" => self.data.n_test = num(key, v)?,
            "data.classes" => self.data.classes = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "encoder.image_size" => e.image_size = num(key, v)?,
            "encoder.channels" => e.channels = num(key, v)?,
            "encoder.patch" => e.patch = num(key, v)?,
            "encoder.dim" => e.dim = num(key, v)?,
            "encoder.depth" => e.depth = num(key, v)?,
            "encoder.heads" => e.heads = num(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = num(key, v)?,
            "decoder.depth" => e.decoder_depth = num(key, v)?,
            "decoder.dim" => e.decoder_dim = num(key, v)?,
            "decoder.heads" => e.decoder_heads = num(key, v)?,
            "encoder.tbm_layers" => e.tbm_layers = list(key, v)?,
            "tbm.hidden" => e.tbm_hidden = if v == "auto" { None } else { Some(num(key, v)?) },
            "tbm.placement" => {
                e.tbm_placement = match v {
                    "after_block" => TbmPlacement::AfterBlock,
                    "after_attention" => TbmPlacement::AfterAttention,
                    _ => return Err(format!("unknown placement `{v}`")),
                }
            }
            "tbm.lambda" => self.lambda = num(key, v)?,
            "tbm.mc_samples" => self.mc_samples = num(key, v)?,
            "tbm.test_noise" => {
                self.test_noise = match v {
                    "sample" => EvalNoise::Sample,
                    "mean" => EvalNoise::Mean,
                    _ => return Err(format!("unknown test noise `{v}`")),
                }
            }
            "tbm.alpha_init" => {
                self.alpha_init = match v {
                    "warmup" => AlphaInit::Warmup,
                    "zero" => AlphaInit::Zero,
                    _ => return Err(format!("unknown alpha init `{v}`")),
                }
            }
            "mask.ratio" => self.mask_ratio = num(key, v)?,
            "pretrain.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "corruption.kinds" => self.corruption.kinds = CorruptionSpec::parse_kinds(v).map_err(|e| e.to_string())?,
            "corruption.severity" => self.corruption.severity = parse_severity(key, v)?,
            "corruption.apply_prob" => self.corruption.apply_prob = num(key, v)?,
            "eval.severity" => self.eval_severity = parse_severity(key, v)?,
            "exec.shard" => self.shard = num(key, v)?,
            _ => {
                let (section, field) = key.split_once('.').ok_or_else(|| format!("unknown key `{key}`"))?;
                let s = match section {
                    "pretrain" => &mut self.pretrain,
                    "probe" => &mut self.probe,
                    "supervised" => &mut self.supervised,
                    _ => return Err(format!("unknown key `{key}`")),
                };
                match field {
                    "epochs" => s.epochs = num(key, v)?,
                    "batch" => s.batch = num(key, v)?,
                    "lr" => s.lr = num(key, v)?,
                    "weight_decay" => s.weight_decay = num(key, v)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// output gives back an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put(
            "regime",
            match self.regime {
                Regime::Pretrain => "pretrain",
                Regime::Probe => "probe",
                Regime::Supervised => "supervised",
            }
            .into(),
        );
        put("seeds", join(&self.seeds));
        put("out", self.out.display().to_string());
        put("data.n_train", self.data.n_train.to_string());
        put("data.n_test", self.data.n_test.to_string());
        put("data.classes", self.data.classes.to_string());
        put("data.seed", self.data.seed.to_string());
        put("encoder.image_size", e.image_size.to_string());
        put("encoder.channels", e.channels.to_string());
        put("encoder.patch", e.patch.to_string());
        put("encoder.dim", e.dim.to_string());
        put("encoder.depth", e.depth.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.mlp_ratio", e.mlp_ratio.to_string());
        put("decoder.depth", e.decoder_depth.to_string());
        put("decoder.dim", e.decoder_dim.to_string());
        put("decoder.heads", e.decoder_heads.to_string());
        put("encoder.tbm_layers", join(&e.tbm_layers));
        put("tbm.hidden", e.tbm_hidden.map_or("auto".into(), |h| h.to_string()));
        put(
            "tbm.placement",
            match e.tbm_placement {
                TbmPlacement::AfterBlock => "after_block",
                TbmPlacement::AfterAttention => "after_attention",
            }
            .into(),
        );
        put("tbm.lambda", self.lambda.to_string());
        put("tbm.mc_samples", self.mc_samples.to_string());
        put(
            "tbm.test_noise",
            match self.test_noise {
                EvalNoise::Sample => "sample",
                EvalNoise::Mean => "mean",
            }
            .into(),
        );
        put(
            "tbm.alpha_init",
            match self.alpha_init {
                AlphaInit::Warmup => "warmup",
                AlphaInit::Zero => "zero",
            }
            .into(),
        );
        put("mask.ratio", self.mask_ratio.to_string());
        put("pretrain.checkpoint_every", self.checkpoint_every.to_string());
        for (name, sch) in [("pretrain", &self.pretrain), ("probe", &self.probe), ("supervised", &self.supervised)] {
            put(&format!("{name}.epochs"), sch.epochs.to_string());
            put(&format!("{name}.batch"), sch.batch.to_string());
            put(&format!("{name}.lr"), sch.lr.to_string());
            put(&format!("{name}.weight_decay"), sch.weight_decay.to_string());
        }
        put("corruption.kinds", join(&self.corruption.kinds.iter().map(|k| k.name()).collect::<Vec<_>>()));
        put("corruption.severity", severity_str(self.corruption.severity));
        put("corruption.apply_prob", self.corruption.apply_prob.to_string());
        put("eval.severity", severity_str(self.eval_severity));
        put("exec.shard", self.shard.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate()?;
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(format!("λ must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        for (name, s) in [("pretrain", &self.pretrain), ("probe", &self.probe), ("supervised", &self.supervised)] {
            if s.batch == 0 || !(s.lr.is_finite() && s.lr >= 0.0) || !(s.weight_decay >= 0.0) {
                return Err(format!("{name}: batch must be positive and lr / weight decay non-negative"));
            }
        }
        if self.shard == 0 || self.mc_samples == 0 {
            return Err("exec.shard and tbm.mc_samples must be positive".into());
        }
        if self.data.n_test == 0 {
            return Err("data.n_test must be positive".into());
        }
        self.corruption.validate().map_err(|e| e.to_string())?;
        if let Severity::Fixed(l) = self.eval_severity {
            if !(1..=5).contains(&l) {
                return Err(format!("eval severity {l} outside 1..=5"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.lambda = 0.1;
        c.encoder.tbm_layers = vec![2];
        c.encoder.tbm_hidden = Some(7);
        c.corruption.severity = Severity::Fixed(3);
        c.seeds = vec![3, 9];
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = ExperimentConfig::parse("# top\npretrain.epochs = 3  # short\n\nencoder.tbm_layers = none\npretrain.epochs=4\n").unwrap();
        assert_eq!(c.pretrain.epochs, 4);
        assert!(c.encoder.tbm_layers.is_empty());
    }

    #[test]
    fn scientific_integers() {
        let c = ExperimentConfig::parse("data.n_train = 1e3").unwrap();
        assert_eq!(c.data.n_train, 1000);
    }

    #[test]
    fn rejects_unknown() {
        let e = ExperimentConfig::parse("ok.no = 1").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(ExperimentConfig::parse("pretrain.epochs").is_err());
        assert!(ExperimentConfig::parse("tbm.lambda = x").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c.lambda = 1.0;
        c.seeds.clear();
        assert!(c.validate().is_err());
    }
}
