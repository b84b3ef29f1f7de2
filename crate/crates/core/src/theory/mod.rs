//! Numerical checks of the boosting theory: Gaussian-world identities by
//! binned Monte Carlo, linear-regression MSE decompositions, and whether
//! training pulls `α` to `ω`.
//!
//! All Monte-Carlo work is split into fixed-size shards with their own PRNG
//! streams and reduced by summing sufficient statistics in shard order, so
//! results do not depend on the execution mode.

mod alpha;
mod gaussian;
mod linear;

pub use alpha::{verify_alpha_convergence, AlphaProtocol, AlphaReport, Routing};
pub use gaussian::{
    posterior_mean_p, verify_bias_formula, verify_conditional_symmetry, verify_posterior_mean, BiasReport, BinRow,
    GaussianFeatureModel, PosteriorReport, SymmetryReport,
};
pub use linear::{fit_ols, mse_learned_boost, mse_suite, LearnedBoostReport, LinearTheoryModel, MseReport, MseRow, OlsAccumulator};

use serde::Serialize;
use thiserror::Error;

use crate::exec::ExecMode;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid model: {0}")]
    Model(String),
    #[error("singular design matrix: {0}")]
    Singular(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, trajectory: Vec<(usize, f64)> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const SHARD: usize = 1 << 16;

/// Split `n` into shards of at most [`SHARD`] samples.
pub fn shard_sizes(n: usize) -> Vec<usize> {
    let mut v = vec![SHARD; n / SHARD];
    if n % SHARD != 0 {
        v.push(n % SHARD);
    }
    v
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
    pub alpha_steps: usize,
    /// Also run the strict-module α diagnostic and the learned-boost MSE
    /// (reported only).
    pub diagnostics: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            bins: 20,
            seed: 0,
            alpha_steps: 16000,
            diagnostics: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// One `(parameter, empirical, formula, stderr)` line of a per-check CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub check: String,
    pub parameter: String,
    pub empirical: f64,
    pub formula: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub mse: MseReport,
    pub symmetry: SymmetryReport,
    pub symmetry_violated: SymmetryReport,
    pub posterior: PosteriorReport,
    pub bias: Vec<BiasReport>,
    pub alpha_uniform: AlphaReport,
    pub alpha_heterogeneous: AlphaReport,
    pub alpha_zero: AlphaReport,
    pub alpha_strict: Option<AlphaReport>,
    pub learned_boost: Option<LearnedBoostReport>,
}

impl SuiteReport {
    /// Long-format rows for every binned / tabulated check.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut out = Vec::new();
        for r in &self.mse.rows {
            out.push(CsvRow {
                check: "mse".into(),
                parameter: r.name.into(),
                empirical: r.empirical,
                formula: r.formula,
                stderr: r.stderr,
            });
        }
        let mut bins = |check: String, rows: &[BinRow]| {
            for b in rows {
                out.push(CsvRow {
                    check: check.clone(),
                    parameter: format!("bin{}:i={:.6}", b.bin, b.mean_i),
                    empirical: b.empirical,
                    formula: b.formula,
                    stderr: b.stderr,
                });
            }
        };
        bins("symmetry_alpha_eq_omega".into(), &self.symmetry.bins);
        bins("symmetry_alpha_2omega".into(), &self.symmetry_violated.bins);
        bins("posterior_mean_p".into(), &self.posterior.bins);
        for b in &self.bias {
            bins(format!("bias_ratio_{}", b.model.alpha / b.model.omega), &b.bins);
        }
        for (name, rep) in [
            ("alpha_uniform", &self.alpha_uniform),
            ("alpha_heterogeneous", &self.alpha_heterogeneous),
            ("alpha_zero", &self.alpha_zero),
        ] {
            for (k, (a, w)) in rep.alpha.iter().zip(&rep.omega).enumerate() {
                out.push(CsvRow {
                    check: name.into(),
                    parameter: format!("dim{k}"),
                    empirical: *a,
                    formula: *w,
                    stderr: f64::NAN,
                });
            }
        }
        out
    }
}

/// Run every theory check. Passing criteria:
/// - MSE identities within 2% relative;
/// - symmetry holds in all bins at `α = ω` and fails in the central bins at
///   `α = 2ω`;
/// - posterior mean of `P` within 1% of `ω` per bin;
/// - bias curve within 1% (L2, relative) at `α/ω ∈ {0.5, 2}` and unbiased
///   within 3 SE per bin at `α = ω`;
/// - `α` recovery: mean in `[0.425, 0.575]` for `ω = 0.5`, rank
///   correlation above 0.9 for heterogeneous `ω`, at least 80% of dimensions
///   within 15% of `ω` in both, and mean `α < 0.05` for `ω = 0`.
pub fn run_suite(cfg: &SuiteConfig, exec: ExecMode) -> Result<SuiteReport, TheoryError> {
    let n = cfg.samples;
    let lin = LinearTheoryModel::uniform(4, 0.5, 0.1, 0.2)?;
    let mse = mse_suite(&lin, n, cfg.seed, exec)?;

    let eq = GaussianFeatureModel::new(0.0, 1.0, 1.0, 1.0)?;
    let symmetry = verify_conditional_symmetry(&eq, n, cfg.bins, cfg.seed, false, exec)?;
    let double = GaussianFeatureModel { alpha: 2.0, ..eq };
    let symmetry_violated = verify_conditional_symmetry(&double, n, cfg.bins, cfg.seed, false, exec)?;
    let posterior = verify_posterior_mean(&eq, 0.7, n, cfg.bins, cfg.seed, exec)?;
    let bias = [0.5, 1.0, 2.0]
        .iter()
        .map(|&ratio| verify_bias_formula(&GaussianFeatureModel { alpha: ratio, ..eq }, n, cfg.bins, cfg.seed, exec))
        .collect::<Result<Vec<_>, _>>()?;

    let k = 16;
    let mut proto = AlphaProtocol::recovery(k);
    proto.steps = cfg.alpha_steps;
    proto.warmup = proto.warmup.min(cfg.alpha_steps / 4);
    let het: Vec<f64> = (0..k).map(|i| 0.2 + 0.6 * i as f64 / (k - 1) as f64).collect();
    let mut jobs: Vec<(Vec<f64>, AlphaProtocol)> = vec![
        (vec![0.5; k], proto.clone()),
        (het, proto.clone()),
        (vec![0.0; k], proto.clone()),
    ];
    if cfg.diagnostics {
        let mut strict = AlphaProtocol::strict(k);
        strict.steps = cfg.alpha_steps;
        jobs.push((vec![0.5; k], strict));
    }
    let seed = cfg.seed;
    let mut alpha_runs = exec
        .map(jobs, |(w, p)| verify_alpha_convergence(&w, &p, seed))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let alpha_strict = if cfg.diagnostics { alpha_runs.pop() } else { None };
    let alpha_zero = alpha_runs.pop().expect("three runs");
    let alpha_heterogeneous = alpha_runs.pop().expect("three runs");
    let alpha_uniform = alpha_runs.pop().expect("three runs");
    let learned_boost = if cfg.diagnostics {
        Some(mse_learned_boost(&lin, 2000, 16, 1e-2, cfg.seed)?)
    } else {
        None
    };

    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        checks.push(Check {
            name: name.into(),
            pass,
            detail,
        })
    };
    for r in &mse.rows {
        push(
            &format!("mse_{}", r.name),
            r.pass,
            format!("empirical {:.6} vs formula {:.6} (rel err {:.4})", r.empirical, r.formula, r.relative_error),
        );
    }
    push("mse_ordering", mse.ordering_holds, "corrupted >= boosted >= clean".into());
    push(
        "symmetry_alpha_eq_omega",
        symmetry.pass && symmetry.empty_bins.is_empty(),
        format!("{} of {} bins within 3 SE", symmetry.bins.len() - symmetry.failing_bins.len(), symmetry.bins.len()),
    );
    let central = symmetry_violated.central_bins();
    let detected = central.iter().all(|c| symmetry_violated.failing_bins.contains(c));
    push(
        "symmetry_violation_detected_alpha_2omega",
        detected,
        format!("failing bins {:?}; central {:?}", symmetry_violated.failing_bins, central),
    );
    push(
        "posterior_mean_p",
        posterior.pass,
        format!("all bins within {}·ω", posterior.tolerance),
    );
    for b in &bias {
        let ratio = b.model.alpha / b.model.omega;
        push(
            &format!("bias_formula_ratio_{ratio}"),
            b.pass,
            match b.relative_l2 {
                Some(r) => format!("relative L2 error {r:.5} (coefficient {})", b.coefficient),
                None => format!("unbiased: max |z| = {:.2}", b.max_z),
            },
        );
    }
    push(
        "alpha_recovery_uniform",
        (0.425..=0.575).contains(&alpha_uniform.mean_alpha),
        format!("mean alpha {:.4} for omega 0.5", alpha_uniform.mean_alpha),
    );
    for (name, rep) in [("alpha_per_dim_uniform", &alpha_uniform), ("alpha_per_dim_heterogeneous", &alpha_heterogeneous)] {
        push(
            name,
            rep.within_15pct >= 0.8,
            format!("{:.0}% of dimensions within 15% of omega", 100.0 * rep.within_15pct),
        );
    }
    let rho = alpha_heterogeneous.rank_correlation.unwrap_or(0.0);
    push("alpha_recovery_rank", rho > 0.9, format!("spearman {rho:.4}"));
    push(
        "alpha_zero_omega",
        alpha_zero.mean_alpha < 0.05,
        format!("mean alpha {:.4} for omega 0", alpha_zero.mean_alpha),
    );
    let pass = checks.iter().all(|c| c.pass);
    Ok(SuiteReport {
        config: cfg.clone(),
        checks,
        pass,
        mse,
        symmetry,
        symmetry_violated,
        posterior,
        bias,
        alpha_uniform,
        alpha_heterogeneous,
        alpha_zero,
        alpha_strict,
        learned_boost,
    })
}
