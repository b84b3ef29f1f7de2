//! Linear regression world `V = βU + c + ε` with `U ~ N(0, I)`,
//! `ε ~ N(0, γ²I)`, and symmetric input/target corruption of std `σ_N`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{shard_sizes, TheoryError};
use crate::exec::ExecMode;
use crate::tbm::{tbm_forward, tbm_recon_loss, Noise, TbmState};
use crate::tensor::{AdamW, CosineSchedule, Graph, OptimState, ParamStore, Rng, Stream, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTheoryModel {
    /// `N_V × N_U`.
    pub beta: DMatrix<f64>,
    pub c: DVector<f64>,
    pub gamma: f64,
    pub sigma_n: f64,
}

impl LinearTheoryModel {
    pub fn new(beta: DMatrix<f64>, c: DVector<f64>, gamma: f64, sigma_n: f64) -> Result<Self, TheoryError> {
        let m = Self { beta, c, gamma, sigma_n };
        m.validate()?;
        Ok(m)
    }

    /// `N_U = N_V = n`, every coefficient equal to `b`, intercepts `0.1·j`.
    pub fn uniform(n: usize, b: f64, gamma: f64, sigma_n: f64) -> Result<Self, TheoryError> {
        Self::new(
            DMatrix::from_element(n, n, b),
            DVector::from_fn(n, |j, _| 0.1 * j as f64),
            gamma,
            sigma_n,
        )
    }

    pub fn n_u(&self) -> usize {
        self.beta.ncols()
    }

    pub fn n_v(&self) -> usize {
        self.beta.nrows()
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.c.len() != self.n_v() || self.n_u() == 0 {
            return Err(TheoryError::Model("β must be N_V × N_U with N_U ≥ 1 and c of length N_V".into()));
        }
        if self.beta.iter().all(|&b| b == 0.0) {
            return Err(TheoryError::Model("at least one β entry must be non-zero".into()));
        }
        if !(self.gamma >= 0.0 && self.sigma_n >= 0.0) {
            return Err(TheoryError::Model("γ and σ_N must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mse_clean_formula(&self) -> f64 {
        self.gamma.powi(2)
    }

    pub fn mse_corrupted_formula(&self) -> f64 {
        let s2 = self.sigma_n.powi(2);
        let bb: f64 = self.beta.iter().map(|b| b * b).sum();
        self.gamma.powi(2) + s2 + bb * s2 / self.n_v() as f64
    }

    pub fn mse_boosted_formula(&self) -> f64 {
        self.gamma.powi(2) + self.sigma_n.powi(2)
    }

    /// One clean `(U, V)` pair.
    pub fn sample(&self, rng: &mut Rng) -> (DVector<f64>, DVector<f64>) {
        let u = DVector::from_fn(self.n_u(), |_, _| rng.normal());
        let eps = DVector::from_fn(self.n_v(), |_, _| self.gamma * rng.normal());
        let v = &self.beta * &u + &self.c + eps;
        (u, v)
    }
}

/// Streaming normal equations for `V ≈ β̂U + ĉ`.
#[derive(Debug, Clone)]
pub struct OlsAccumulator {
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
    n: usize,
}

impl OlsAccumulator {
    pub fn new(n_u: usize, n_v: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(n_u + 1, n_u + 1),
            xty: DMatrix::zeros(n_u + 1, n_v),
            n: 0,
        }
    }

    pub fn push(&mut self, u: &[f64], v: &[f64]) {
        let p = u.len() + 1;
        let x = |k: usize| if k < u.len() { u[k] } else { 1.0 };
        for a in 0..p {
            let xa = x(a);
            for b in 0..p {
                self.xtx[(a, b)] += xa * x(b);
            }
            for (j, &vj) in v.iter().enumerate() {
                self.xty[(a, j)] += xa * vj;
            }
        }
        self.n += 1;
    }

    pub fn merge(mut self, o: &OlsAccumulator) -> Self {
        self.xtx += &o.xtx;
        self.xty += &o.xty;
        self.n += o.n;
        self
    }

    /// `(β̂, ĉ)` with β̂ shaped `N_V × N_U`.
    pub fn solve(&self) -> Result<(DMatrix<f64>, DVector<f64>), TheoryError> {
        let p = self.xtx.nrows();
        if self.n < p {
            return Err(TheoryError::Singular(format!("{} samples for {} unknowns", self.n, p)));
        }
        let chol = self
            .xtx
            .clone()
            .cholesky()
            .ok_or_else(|| TheoryError::Singular("design matrix is not full rank".into()))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
        if lo <= 1e-10 * hi {
            return Err(TheoryError::Singular("design matrix is numerically rank deficient".into()));
        }
        let theta = chol.solve(&self.xty);
        let nu = p - 1;
        let beta = theta.rows(0, nu).transpose();
        let c = theta.row(nu).transpose();
        Ok((beta, c))
    }
}

/// Closed-form least squares over paired samples.
pub fn fit_ols(u: &[Vec<f64>], v: &[Vec<f64>]) -> Result<(DMatrix<f64>, DVector<f64>), TheoryError> {
    let (Some(u0), Some(v0)) = (u.first(), v.first()) else {
        return Err(TheoryError::Singular("no samples".into()));
    };
    if u.len() != v.len() {
        return Err(TheoryError::Model(format!("{} inputs but {} targets", u.len(), v.len())));
    }
    let mut acc = OlsAccumulator::new(u0.len(), v0.len());
    for (a, b) in u.iter().zip(v) {
        acc.push(a, b);
    }
    acc.solve()
}

#[derive(Debug, Clone, Serialize)]
pub struct MseRow {
    pub name: &'static str,
    pub empirical: f64,
    pub formula: f64,
    pub stderr: f64,
    pub relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseReport {
    pub samples: usize,
    pub beta_err_inf: f64,
    pub rows: Vec<MseRow>,
    pub ordering_holds: bool,
    pub pass: bool,
}

#[derive(Default, Clone)]
struct MseAcc {
    n: usize,
    sum: [f64; 3],
    sq: [f64; 3],
}

/// Fit on clean data, then score the three settings on fresh samples:
/// clean (`V` from `U`), corrupted (`Ṽ` from `Ũ`), boosted (`Ṽ` from `U`).
pub fn mse_suite(model: &LinearTheoryModel, n_samples: usize, seed: u64, exec: ExecMode) -> Result<MseReport, TheoryError> {
    model.validate()?;
    let (nu, nv) = (model.n_u(), model.n_v());
    let fits = exec.map(shard_sizes(n_samples).into_iter().enumerate().collect(), |(s, len)| {
        let mut rng = Rng::for_purpose(seed, Stream::Theory, (3 << 20) + s as u64);
        let mut acc = OlsAccumulator::new(nu, nv);
        for _ in 0..len {
            let (u, v) = model.sample(&mut rng);
            acc.push(u.as_slice(), v.as_slice());
        }
        acc
    });
    let acc = fits.iter().skip(1).fold(fits[0].clone(), |a, b| a.merge(b));
    let (beta_hat, c_hat) = acc.solve()?;
    let beta_err = (&beta_hat - &model.beta).amax();

    let parts = exec.map(shard_sizes(n_samples).into_iter().enumerate().collect(), |(s, len)| {
        let mut rng = Rng::for_purpose(seed, Stream::Theory, (4 << 20) + s as u64);
        let mut a = MseAcc::default();
        for _ in 0..len {
            let (u, v) = model.sample(&mut rng);
            let su = DVector::from_fn(nu, |_, _| model.sigma_n * rng.normal());
            let sv = DVector::from_fn(nv, |_, _| model.sigma_n * rng.normal());
            let ut = &u + su;
            let vt = &v + sv;
            let clean = (&v - (&beta_hat * &u + &c_hat)).norm_squared() / nv as f64;
            let corrupted = (&vt - (&beta_hat * &ut + &c_hat)).norm_squared() / nv as f64;
            let boosted = (&vt - (&beta_hat * &u + &c_hat)).norm_squared() / nv as f64;
            for (k, e) in [clean, corrupted, boosted].into_iter().enumerate() {
                a.sum[k] += e;
                a.sq[k] += e * e;
            }
            a.n += 1;
        }
        a
    });
    let tot = parts.iter().fold(MseAcc::default(), |mut t, p| {
        t.n += p.n;
        for k in 0..3 {
            t.sum[k] += p.sum[k];
            t.sq[k] += p.sq[k];
        }
        t
    });
    let n = tot.n as f64;
    let formulas = [
        model.mse_clean_formula(),
        model.mse_corrupted_formula(),
        model.mse_boosted_formula(),
    ];
    let names = ["clean", "corrupted", "boosted"];
    let rows: Vec<MseRow> = (0..3)
        .map(|k| {
            let mean = tot.sum[k] / n;
            let var = (tot.sq[k] - n * mean * mean) / (n - 1.0);
            let rel = if formulas[k] == 0.0 {
                mean.abs()
            } else {
                (mean - formulas[k]).abs() / formulas[k]
            };
            MseRow {
                name: names[k],
                empirical: mean,
                formula: formulas[k],
                stderr: (var.max(0.0) / n).sqrt(),
                relative_error: rel,
                pass: rel <= 0.02,
            }
        })
        .collect();
    let ordering_holds = formulas[1] >= formulas[2] && formulas[2] >= formulas[0];
    Ok(MseReport {
        samples: n_samples,
        beta_err_inf: beta_err,
        pass: rows.iter().all(|r| r.pass) && ordering_holds,
        rows,
        ordering_holds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnedBoostReport {
    pub steps: usize,
    pub mse_corrupted_input: f64,
    pub mse_learned_boost: f64,
    pub mse_ideal_boost: f64,
    pub alpha_effective: Vec<f64>,
}

/// Put a TBM in front of the fitted linear map and train it on the
/// regression loss (plus `L_recon`) with corrupted inputs and targets;
/// report the MSE it reaches next to the ideal `Û = U` value. Not asserted.
pub fn mse_learned_boost(model: &LinearTheoryModel, steps: usize, hidden: usize, lr: f64, seed: u64) -> Result<LearnedBoostReport, TheoryError> {
    model.validate()?;
    let (nu, nv) = (model.n_u(), model.n_v());
    let batch = 256;
    let mut rng = Rng::for_purpose(seed, Stream::Theory, 5 << 20);
    let mut fit = OlsAccumulator::new(nu, nv);
    for _ in 0..20_000 {
        let (u, v) = model.sample(&mut rng);
        fit.push(u.as_slice(), v.as_slice());
    }
    let (beta_hat, c_hat) = fit.solve()?;
    // β̂ is column-major N_V × N_U, so its storage order is βᵀ row-major.
    let w = Tensor::new(vec![nu, nv], beta_hat.iter().copied().collect())?;
    let c = Tensor::from_vec(c_hat.iter().copied().collect());

    let mut store = ParamStore::new();
    let mut init = Rng::for_purpose(seed, Stream::Init, 0);
    let st = TbmState::new(&mut store, "lin", nu, hidden, 1.0, &mut init)?;
    store.get_mut(st.alpha_raw).value.data_mut().fill(0.1 * model.sigma_n.max(1e-3));
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut os = OptimState::new(&store, CosineSchedule { base_lr: lr, total_steps: steps as u64 });

    let draw = |rng: &mut Rng, n: usize| {
        let mut u = Vec::with_capacity(n * nu);
        let mut ut = Vec::with_capacity(n * nu);
        let mut vt = Vec::with_capacity(n * nv);
        for _ in 0..n {
            let (a, b) = model.sample(rng);
            for x in a.iter() {
                u.push(*x);
                ut.push(x + model.sigma_n * rng.normal());
            }
            for y in b.iter() {
                vt.push(y + model.sigma_n * rng.normal());
            }
        }
        (u, ut, vt)
    };

    let forward = |g: &mut Graph, store: &ParamStore, ut: &[f64], vt: &[f64], n: usize, noise: &mut Rng| -> Result<_, TheoryError> {
        let b = g.bind(store, true)?;
        let x = g.constant(Tensor::new(vec![n, nu], ut.to_vec())?)?;
        let (uh, tr) = tbm_forward(g, &b, &st, x, Noise::Sample(noise), 1)?;
        let wv = g.constant(w.clone())?;
        let cv = g.constant(c.clone())?;
        let pred = g.matmul(uh, wv)?;
        let pred = g.add(pred, cv)?;
        let target = g.constant(Tensor::new(vec![n, nv], vt.to_vec())?)?;
        let d = g.sub(pred, target)?;
        let ss = g.sum_squares(d)?;
        let task = g.scale(ss, 1.0 / (n * nv) as f64)?;
        Ok((b, task, tr))
    };

    for step in 0..steps {
        let mut drng = Rng::for_purpose(seed, Stream::Data, step as u64);
        let (_, ut, vt) = draw(&mut drng, batch);
        let mut nrng = Rng::for_purpose(seed, Stream::TbmNoise, step as u64);
        let mut g = Graph::new();
        let (b, task, tr) = forward(&mut g, &store, &ut, &vt, batch, &mut nrng)?;
        let rec = tbm_recon_loss(&mut g, tr.f, tr.f_hat, st.lambda)?;
        let total = g.add(task, rec)?;
        g.backward(total)?;
        opt.step(&mut store, &g.param_grads(&b), &mut os)?;
    }

    let n_eval = 20_000;
    let mut erng = Rng::for_purpose(seed, Stream::Eval, 0);
    let (u, ut, vt) = draw(&mut erng, n_eval);
    let mut nrng = Rng::for_purpose(seed, Stream::Eval, 1);
    let mut g = Graph::new();
    let (_, task, _) = forward(&mut g, &store, &ut, &vt, n_eval, &mut nrng)?;
    let learned = g.value(task).item();
    let mse_of = |inp: &[f64]| {
        let mut s = 0.0;
        for r in 0..n_eval {
            let x = DVector::from_row_slice(&inp[r * nu..(r + 1) * nu]);
            let p = &beta_hat * x + &c_hat;
            for j in 0..nv {
                s += (vt[r * nv + j] - p[j]).powi(2);
            }
        }
        s / (n_eval * nv) as f64
    };
    Ok(LearnedBoostReport {
        steps,
        mse_corrupted_input: mse_of(&ut),
        mse_learned_boost: learned,
        mse_ideal_boost: mse_of(&u),
        alpha_effective: crate::tbm::alpha_effective(&store, &st),
    })
}
