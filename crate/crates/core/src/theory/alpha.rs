//! Does training drive `α` towards the natural corruption level `ω`?
//!
//! World: `R = sin(z·Wᵀ + φ)` with a low-dimensional latent `z ~ U(−1, 1)^d`,
//! features `F = R + P` with `P_k ~ N(0, ω_k²)`, and regression targets
//! `Ṽ = R + P'` that carry independent noise of the same scale. The TBM's
//! boosted output is read out directly against `Ṽ`.
//!
//! Two loss routings are supported:
//! - `Split`: the denoiser `g` learns from `L_recon` only and `α` from the
//!   task loss only (gradient through the explicit `−Q` term when
//!   `AlphaGrad::ExplicitTerm`). This is the setting in which the claimed
//!   `α ≈ ω` equilibrium is reachable at toy scale.
//! - `Joint`: every parameter learns from `task + λ·L_recon`.

use serde::Serialize;

use super::{spearman, TheoryError};
use crate::tbm::{alpha_effective, tbm_forward, tbm_recon_loss, AlphaGrad, Noise, TbmState};
use crate::tensor::{AdamW, CosineSchedule, Graph, OptimState, ParamStore, Rng, Stream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Split,
    Joint,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaProtocol {
    pub latent: usize,
    pub hidden: usize,
    #[serde(skip)]
    pub alpha_grad: AlphaGrad,
    pub routing: Routing,
    pub steps: usize,
    /// Steps during which only `g` is updated.
    pub warmup: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha_init: f64,
    pub lambda: f64,
    pub log_every: usize,
}

impl AlphaProtocol {
    /// Settings that recover `α` (wide denoiser, split routing).
    pub fn recovery(dim: usize) -> Self {
        Self {
            latent: 1,
            hidden: 2 * dim,
            alpha_grad: AlphaGrad::ExplicitTerm,
            routing: Routing::Split,
            steps: 16000,
            warmup: 2000,
            batch: 256,
            lr: 1e-3,
            alpha_init: 0.05,
            lambda: 1.0,
            log_every: 100,
        }
    }

    /// The module exactly as used in the transformer: `K/2` hidden width,
    /// full gradient routing, all parameters on the combined loss.
    pub fn strict(dim: usize) -> Self {
        Self {
            hidden: dim / 2,
            alpha_grad: AlphaGrad::Full,
            routing: Routing::Joint,
            warmup: 0,
            ..Self::recovery(dim)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaReport {
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub mean_alpha: f64,
    pub mean_omega: f64,
    /// Fraction of dimensions with `|α_k − ω_k| ≤ 0.15·ω_k`.
    pub within_15pct: f64,
    /// Spearman correlation between `α` and `ω` (when `ω` varies).
    pub rank_correlation: Option<f64>,
    /// `(step, mean α)`.
    pub trajectory: Vec<(usize, f64)>,
    pub final_task_loss: f64,
    pub final_recon_loss: f64,
    pub diverged: bool,
}

struct World {
    w: Vec<f64>,
    phase: Vec<f64>,
    dim: usize,
    latent: usize,
}

impl World {
    fn new(dim: usize, latent: usize, rng: &mut Rng) -> Self {
        Self {
            w: (0..dim * latent).map(|_| 1.5 * rng.normal()).collect(),
            phase: (0..dim).map(|_| std::f64::consts::TAU * rng.uniform()).collect(),
            dim,
            latent,
        }
    }

    fn clean(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let z: Vec<f64> = (0..self.latent).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            for k in 0..self.dim {
                let a: f64 = (0..self.latent).map(|j| z[j] * self.w[k * self.latent + j]).sum();
                out.push((a + self.phase[k]).sin());
            }
        }
        out
    }
}

pub fn verify_alpha_convergence(omega: &[f64], proto: &AlphaProtocol, seed: u64) -> Result<AlphaReport, TheoryError> {
    let dim = omega.len();
    if dim == 0 || omega.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(TheoryError::Model("ω must be a non-empty vector of finite, non-negative values".into()));
    }
    let mut wrng = Rng::for_purpose(seed, Stream::Theory, 6 << 20);
    let world = World::new(dim, proto.latent, &mut wrng);

    let mut store = ParamStore::new();
    let mut init = Rng::for_purpose(seed, Stream::Init, 0);
    let mut st = TbmState::new(&mut store, "probe", dim, proto.hidden, proto.lambda, &mut init)?;
    st.alpha_grad = proto.alpha_grad;
    store.get_mut(st.alpha_raw).value.data_mut().fill(proto.alpha_init);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let constant = CosineSchedule {
        base_lr: proto.lr,
        total_steps: 0,
    };
    let mut os = OptimState::new(&store, constant);
    let alpha_idx = st.alpha_raw.index();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut trajectory = vec![(0, mean(&alpha_effective(&store, &st)))];
    let (mut last_task, mut last_rec) = (f64::NAN, f64::NAN);
    let n = proto.batch;

    for step in 0..proto.steps {
        let mut drng = Rng::for_purpose(seed, Stream::Data, step as u64);
        let r = world.clean(&mut drng, n);
        let mut f = r.clone();
        let mut vt = r;
        for (i, (fi, vi)) in f.iter_mut().zip(vt.iter_mut()).enumerate() {
            let w = omega[i % dim];
            *fi += w * drng.normal();
            *vi += w * drng.normal();
        }
        let mut nrng = Rng::for_purpose(seed, Stream::TbmNoise, step as u64);
        let mut g = Graph::new();
        let b = g.bind(&store, true)?;
        let fv = g.constant(Tensor::new(vec![n, dim], f)?)?;
        let (r_hat, tr) = tbm_forward(&mut g, &b, &st, fv, Noise::Sample(&mut nrng), 1)?;
        let target = g.constant(Tensor::new(vec![n, dim], vt)?)?;
        let d = g.sub(target, r_hat)?;
        let ss = g.sum_squares(d)?;
        let task = g.scale(ss, 1.0 / n as f64)?;
        let rec = tbm_recon_loss(&mut g, tr.f, tr.f_hat, proto.lambda)?;
        last_task = g.value(task).item();
        last_rec = g.value(rec).item();
        if !(last_task.is_finite() && last_rec.is_finite()) {
            return Err(TheoryError::Diverged { step, trajectory });
        }

        let mut grads = match proto.routing {
            Routing::Joint => {
                let total = g.add(task, rec)?;
                g.backward(total)?;
                g.param_grads(&b)
            }
            Routing::Split => {
                g.backward(task)?;
                let alpha_grad = g.param_grads(&b)[alpha_idx].clone();
                g.zero_grad();
                g.backward(rec)?;
                let mut gr = g.param_grads(&b);
                gr[alpha_idx] = alpha_grad;
                gr
            }
        };
        if step < proto.warmup {
            grads[alpha_idx].iter_mut().for_each(|x| *x = 0.0);
        }
        // A zero gradient leaves α's Adam moments at zero, so α stays put.
        opt.step(&mut store, &grads, &mut os)?;
        if (step + 1) % proto.log_every.max(1) == 0 {
            trajectory.push((step + 1, mean(&alpha_effective(&store, &st))));
        }
    }

    let alpha = alpha_effective(&store, &st);
    let within = omega
        .iter()
        .zip(&alpha)
        .filter(|(&w, &a)| (a - w).abs() <= 0.15 * w)
        .count() as f64
        / dim as f64;
    let varies = omega.iter().any(|&w| w != omega[0]);
    Ok(AlphaReport {
        mean_alpha: mean(&alpha),
        mean_omega: mean(omega),
        rank_correlation: varies.then(|| spearman(&alpha, omega)),
        within_15pct: within,
        omega: omega.to_vec(),
        alpha,
        trajectory,
        final_task_loss: last_task,
        final_recon_loss: last_rec,
        diverged: false,
    })
}
