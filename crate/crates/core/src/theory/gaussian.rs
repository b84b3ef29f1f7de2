//! Scalar Gaussian world: `F = R + P`, `I = F + Q` with
//! `R ~ N(μ_R, σ_R²)`, `P ~ N(0, ω²)`, `Q ~ N(0, α²)` independent.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{shard_sizes, TheoryError};
use crate::exec::ExecMode;
use crate::tensor::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianFeatureModel {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub omega: f64,
    pub alpha: f64,
}

impl GaussianFeatureModel {
    pub fn new(mu_r: f64, sigma_r: f64, omega: f64, alpha: f64) -> Result<Self, TheoryError> {
        let m = Self {
            mu_r,
            sigma_r,
            omega,
            alpha,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.sigma_r > 0.0 && self.omega > 0.0 && self.alpha >= 0.0 && self.mu_r.is_finite()) {
            return Err(TheoryError::Model(format!("need σ_R > 0, ω > 0, α ≥ 0: {self:?}")));
        }
        Ok(())
    }

    /// Total variance of `I`.
    pub fn var_i(&self) -> f64 {
        self.sigma_r.powi(2) + self.omega.powi(2) + self.alpha.powi(2)
    }

    pub fn e_r_given_i(&self, i: f64) -> f64 {
        self.mu_r + self.sigma_r.powi(2) / self.var_i() * (i - self.mu_r)
    }

    pub fn e_p_given_i(&self, i: f64) -> f64 {
        self.omega.powi(2) / self.var_i() * (i - self.mu_r)
    }

    pub fn e_q_given_i(&self, i: f64) -> f64 {
        self.alpha.powi(2) / self.var_i() * (i - self.mu_r)
    }

    /// The MSE-optimal denoiser `E[F | I]`.
    pub fn optimal_denoiser(&self, i: f64) -> f64 {
        let s = self.sigma_r.powi(2) + self.omega.powi(2);
        self.mu_r + s / self.var_i() * (i - self.mu_r)
    }

    /// `2·E[F|I] − I`.
    pub fn boosted(&self, i: f64) -> f64 {
        2.0 * self.optimal_denoiser(i) - i
    }

    /// `1 − α²/ω²`.
    pub fn bias_coefficient(&self) -> f64 {
        1.0 - self.alpha.powi(2) / self.omega.powi(2)
    }

    /// Closed-form `E[R|I] + (1 − α²/ω²)·E[P|I]`.
    pub fn boosted_formula(&self, i: f64) -> f64 {
        self.e_r_given_i(i) + self.bias_coefficient() * self.e_p_given_i(i)
    }

    /// Edges of `n` equal-probability bins of `N(mean, sd²)` (n − 1 inner edges).
    pub fn quantile_edges(mean: f64, sd: f64, n: usize) -> Vec<f64> {
        let d = Normal::new(mean, sd).expect("valid normal");
        (1..n).map(|k| d.inverse_cdf(k as f64 / n as f64)).collect()
    }
}

/// `E[P | I = i, R = r] = ω²/(α²+ω²)·(i − r)`.
pub fn posterior_mean_p(model: &GaussianFeatureModel, i: f64, r: f64) -> Result<f64, TheoryError> {
    let (a2, w2) = (model.alpha.powi(2), model.omega.powi(2));
    if a2 + w2 == 0.0 {
        return Err(TheoryError::Model("posterior mean undefined for α = ω = 0".into()));
    }
    Ok(w2 / (a2 + w2) * (i - r))
}

fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x)
}

/// Per-bin sufficient statistics for up to four tracked quantities.
#[derive(Debug, Clone, Default)]
struct Acc {
    n: Vec<u64>,
    sum: Vec<[f64; 4]>,
    sq: Vec<[f64; 4]>,
}

impl Acc {
    fn new(bins: usize) -> Self {
        Self {
            n: vec![0; bins],
            sum: vec![[0.0; 4]; bins],
            sq: vec![[0.0; 4]; bins],
        }
    }

    fn push(&mut self, b: usize, x: [f64; 4]) {
        self.n[b] += 1;
        for k in 0..4 {
            self.sum[b][k] += x[k];
            self.sq[b][k] += x[k] * x[k];
        }
    }

    fn merge(mut self, o: &Acc) -> Self {
        for b in 0..self.n.len() {
            self.n[b] += o.n[b];
            for k in 0..4 {
                self.sum[b][k] += o.sum[b][k];
                self.sq[b][k] += o.sq[b][k];
            }
        }
        self
    }

    fn mean(&self, b: usize, k: usize) -> f64 {
        self.sum[b][k] / self.n[b] as f64
    }

    /// Standard error of the bin mean of quantity `k`.
    fn se(&self, b: usize, k: usize) -> f64 {
        let n = self.n[b] as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let m = self.sum[b][k] / n;
        let var = (self.sq[b][k] - n * m * m) / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    }
}

/// Draw `n` samples in shards (one PRNG stream each) and bin them.
fn sample_binned(
    n: usize,
    bins: usize,
    seed: u64,
    stream_base: u64,
    exec: ExecMode,
    f: impl Fn(&mut Rng) -> (f64, [f64; 4]) + Sync + Send,
    edges: &[f64],
) -> Acc {
    let shards = shard_sizes(n);
    let parts = exec.map(shards.into_iter().enumerate().collect(), |(s, len)| {
        let mut rng = Rng::for_purpose(seed, Stream::Theory, stream_base + s as u64);
        let mut acc = Acc::new(bins);
        for _ in 0..len {
            let (key, x) = f(&mut rng);
            acc.push(bin_of(edges, key), x);
        }
        acc
    });
    parts.iter().fold(Acc::new(bins), |a, p| a.merge(p))
}

#[derive(Debug, Clone, Serialize)]
pub struct BinRow {
    pub bin: usize,
    pub count: u64,
    pub mean_i: f64,
    pub empirical: f64,
    pub formula: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    pub model: GaussianFeatureModel,
    pub samples: usize,
    pub bins: Vec<BinRow>,
    pub empty_bins: Vec<usize>,
    /// Bins with `|Ê[Q|bin] − Ê[P|bin]| ≥ 3·SE`.
    pub failing_bins: Vec<usize>,
    pub pass: bool,
}

impl SymmetryReport {
    /// The two bins that straddle the median of `I`.
    pub fn central_bins(&self) -> [usize; 2] {
        let n = self.bins.len();
        [(n - 1) / 2, n / 2]
    }
}

/// Binned check of `E[Q|I] = E[P|I]`. `empirical` holds `Ê[Q − P | bin]`,
/// `formula` holds the closed form `(α² − ω²)/Var(I)·(i − μ_R)` at the bin
/// mean. With `swap`, the draws used for `P` and `Q` trade places.
pub fn verify_conditional_symmetry(
    model: &GaussianFeatureModel,
    n_samples: usize,
    n_bins: usize,
    seed: u64,
    swap: bool,
    exec: ExecMode,
) -> Result<SymmetryReport, TheoryError> {
    model.validate()?;
    let m = *model;
    let edges = GaussianFeatureModel::quantile_edges(m.mu_r, m.var_i().sqrt(), n_bins);
    let acc = sample_binned(
        n_samples,
        n_bins,
        seed,
        0,
        exec,
        |rng| {
            let r = m.mu_r + m.sigma_r * rng.normal();
            let z1 = rng.normal();
            let z2 = rng.normal();
            let (zp, zq) = if swap { (z2, z1) } else { (z1, z2) };
            let p = m.omega * zp;
            let q = m.alpha * zq;
            let i = r + p + q;
            (i, [q - p, i, p, q])
        },
        &edges,
    );
    let mut bins = Vec::new();
    let mut empty = Vec::new();
    let mut failing = Vec::new();
    let coef = (m.alpha.powi(2) - m.omega.powi(2)) / m.var_i();
    for b in 0..n_bins {
        if acc.n[b] < 2 {
            empty.push(b);
            continue;
        }
        let d = acc.mean(b, 0);
        let se = acc.se(b, 0);
        let pass = d.abs() < 3.0 * se;
        if !pass {
            failing.push(b);
        }
        let mean_i = acc.mean(b, 1);
        bins.push(BinRow {
            bin: b,
            count: acc.n[b],
            mean_i,
            empirical: d,
            formula: coef * (mean_i - m.mu_r),
            stderr: se,
            pass,
        });
    }
    Ok(SymmetryReport {
        model: m,
        samples: n_samples,
        pass: failing.is_empty(),
        bins,
        empty_bins: empty,
        failing_bins: failing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PosteriorReport {
    pub model: GaussianFeatureModel,
    pub r: f64,
    pub samples: usize,
    pub bins: Vec<BinRow>,
    /// Tolerance as a fraction of ω.
    pub tolerance: f64,
    pub pass: bool,
}

/// With `R = r` held fixed, bins of `I` compare `Ê[P|bin]` against
/// `ω²/(α²+ω²)·(ī − r)`; the formula is linear in `i`, so evaluating it at
/// the bin mean of `I` is exact.
pub fn verify_posterior_mean(
    model: &GaussianFeatureModel,
    r: f64,
    n_samples: usize,
    n_bins: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<PosteriorReport, TheoryError> {
    model.validate()?;
    let m = *model;
    let sd = (m.omega.powi(2) + m.alpha.powi(2)).sqrt();
    let edges = GaussianFeatureModel::quantile_edges(r, sd, n_bins);
    let acc = sample_binned(
        n_samples,
        n_bins,
        seed,
        1 << 20,
        exec,
        |rng| {
            let p = m.omega * rng.normal();
            let q = m.alpha * rng.normal();
            let i = r + p + q;
            (i, [p, i, 0.0, 0.0])
        },
        &edges,
    );
    let tol = 0.01 * m.omega;
    let mut bins = Vec::new();
    for b in 0..n_bins {
        if acc.n[b] < 2 {
            continue;
        }
        let mean_i = acc.mean(b, 1);
        let formula = posterior_mean_p(&m, mean_i, r)?;
        let emp = acc.mean(b, 0);
        bins.push(BinRow {
            bin: b,
            count: acc.n[b],
            mean_i,
            empirical: emp,
            formula,
            stderr: acc.se(b, 0),
            pass: (emp - formula).abs() < tol,
        });
    }
    Ok(PosteriorReport {
        model: m,
        r,
        samples: n_samples,
        pass: bins.iter().all(|b| b.pass),
        bins,
        tolerance: 0.01,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub model: GaussianFeatureModel,
    pub samples: usize,
    pub coefficient: f64,
    /// `empirical` = `Ê[R̂* − R | bin]`, `formula` = `(1 − α²/ω²)·E[P|ī]`.
    pub bins: Vec<BinRow>,
    /// `‖empirical − formula‖₂ / ‖formula‖₂`; `None` when the formula
    /// curve is identically zero (α = ω).
    pub relative_l2: Option<f64>,
    /// Largest `|empirical − formula| / SE` over bins.
    pub max_z: f64,
    pub pass: bool,
}

/// Monte-Carlo bias of the boosted estimate `2F̂* − I` with the optimal
/// denoiser. Passes when the curve-level relative error is ≤ 1%, or, when
/// the predicted bias is zero, when every bin is within 3 standard errors.
pub fn verify_bias_formula(
    model: &GaussianFeatureModel,
    n_samples: usize,
    n_bins: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<BiasReport, TheoryError> {
    model.validate()?;
    let m = *model;
    let edges = GaussianFeatureModel::quantile_edges(m.mu_r, m.var_i().sqrt(), n_bins);
    let acc = sample_binned(
        n_samples,
        n_bins,
        seed,
        2 << 20,
        exec,
        |rng| {
            let r = m.mu_r + m.sigma_r * rng.normal();
            let p = m.omega * rng.normal();
            let q = m.alpha * rng.normal();
            let i = r + p + q;
            (i, [m.boosted(i) - r, i, 0.0, 0.0])
        },
        &edges,
    );
    let coef = m.bias_coefficient();
    let mut bins = Vec::new();
    let (mut num, mut den, mut max_z) = (0.0f64, 0.0f64, 0.0f64);
    for b in 0..n_bins {
        if acc.n[b] < 2 {
            continue;
        }
        let mean_i = acc.mean(b, 1);
        let formula = coef * m.e_p_given_i(mean_i);
        let emp = acc.mean(b, 0);
        let se = acc.se(b, 0);
        num += (emp - formula).powi(2);
        den += formula.powi(2);
        let z = (emp - formula).abs() / se;
        max_z = max_z.max(z);
        bins.push(BinRow {
            bin: b,
            count: acc.n[b],
            mean_i,
            empirical: emp,
            formula,
            stderr: se,
            pass: z < 3.0,
        });
    }
    let relative_l2 = (den > 0.0).then(|| (num / den).sqrt());
    let pass = match relative_l2 {
        Some(rel) => rel <= 0.01,
        None => bins.iter().all(|b| b.pass),
    };
    Ok(BiasReport {
        model: m,
        samples: n_samples,
        coefficient: coef,
        bins,
        relative_l2,
        max_z,
        pass,
    })
}
