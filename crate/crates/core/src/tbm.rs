//! Token boosting: add learned-scale Gaussian noise `Q = relu(α) ⊙ S` to the
//! tokens, denoise `I = F + Q` with a small autoencoder `g`, and emit the
//! boosted estimate `R̂ = 2·g(I) − I`.
//!
//! `R̂` is assembled as `F + (2F̂ − I − F)` so there is an identity path from
//! `F` to the output; numerically it is the same quantity.

use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Rng, Tensor, TensorError, Var};

/// Which paths carry gradient into `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaGrad {
    /// Through every use of `Q` (the denoiser input and the `−I` term).
    #[default]
    Full,
    /// Only through the explicit `−Q` in `R̂ = 2F̂ − F − Q`; the denoiser
    /// sees `Q` as a constant.
    ExplicitTerm,
}

/// How `Q` is formed when not training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNoise {
    /// Draw `S` from the eval stream, same as training.
    #[default]
    Sample,
    /// Replace `Q` with its mean (zero).
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    /// `K → hidden → hidden → K` with ReLU between layers.
    Mlp([Dense; 3]),
    /// `g(x) = x`; a test fixture that turns boosting into a pass-through.
    Identity,
}

/// Handles to one insertion point's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct TbmState {
    pub name: String,
    pub dim: usize,
    pub hidden: usize,
    pub alpha_raw: ParamId,
    pub g: Denoiser,
    pub lambda: f64,
    pub alpha_grad: AlphaGrad,
}

/// Every intermediate of one forward call (first noise draw).
#[derive(Debug, Clone, Copy)]
pub struct TbmTrace {
    pub f: Var,
    pub q: Var,
    pub i: Var,
    pub f_hat: Var,
    pub r_hat: Var,
}

fn uniform_init(store: &mut ParamStore, name: String, shape: &[usize], bound: f64, decay: bool, rng: &mut Rng) -> ParamId {
    store.add(name, Tensor::uniform(shape, bound, rng), decay)
}

impl TbmState {
    /// Register `tbm.<layer>.*` parameters. `hidden` is normally `dim / 2`.
    pub fn new(store: &mut ParamStore, layer: &str, dim: usize, hidden: usize, lambda: f64, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(TensorError::Invalid {
                op: "tbm",
                reason: format!("dim {dim} and hidden {hidden} must be positive"),
            });
        }
        check_lambda(lambda)?;
        let name = format!("tbm.{layer}");
        let alpha_raw = store.add(format!("{name}.alpha_raw"), Tensor::zeros(&[dim]), false);
        let sizes = [(dim, hidden), (hidden, hidden), (hidden, dim)];
        let layers: Vec<Dense> = sizes
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = uniform_init(store, format!("{name}.g.{i}.weight"), &[fan_in, fan_out], bound, true, rng);
                let bias = if i == 2 {
                    store.add(format!("{name}.g.{i}.bias"), Tensor::zeros(&[fan_out]), false)
                } else {
                    uniform_init(store, format!("{name}.g.{i}.bias"), &[fan_out], bound, false, rng)
                };
                Dense { weight, bias }
            })
            .collect();
        Ok(Self {
            name,
            dim,
            hidden,
            alpha_raw,
            g: Denoiser::Mlp([layers[0], layers[1], layers[2]]),
            lambda,
            alpha_grad: AlphaGrad::Full,
        })
    }

    /// Re-attach to parameters that already exist in `store` (checkpoint load).
    pub fn attach(store: &ParamStore, layer: &str, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let name = format!("tbm.{layer}");
        let find = |suffix: &str| {
            store.find(&format!("{name}.{suffix}")).ok_or_else(|| TensorError::Invalid {
                op: "tbm",
                reason: format!("missing parameter {name}.{suffix}"),
            })
        };
        let alpha_raw = find("alpha_raw")?;
        let mut layers = Vec::new();
        for i in 0..3 {
            layers.push(Dense {
                weight: find(&format!("g.{i}.weight"))?,
                bias: find(&format!("g.{i}.bias"))?,
            });
        }
        let dim = store.get(alpha_raw).value.len();
        let hidden = store.get(layers[0].bias).value.len();
        Ok(Self {
            name,
            dim,
            hidden,
            alpha_raw,
            g: Denoiser::Mlp([layers[0], layers[1], layers[2]]),
            lambda,
            alpha_grad: AlphaGrad::Full,
        })
    }

    /// `alpha_raw ← 0.1 · std_k(F)` from one warm-up batch of features with
    /// last dimension `K`.
    pub fn init_alpha(&self, store: &mut ParamStore, features: &Tensor) -> Result<()> {
        let k = self.dim;
        if features.shape().last() != Some(&k) || features.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "tbm.init_alpha",
                lhs: features.shape().to_vec(),
                rhs: vec![k],
            });
        }
        let rows = features.len() / k;
        let mut mean = vec![0.0; k];
        for r in 0..rows {
            for c in 0..k {
                mean[c] += features.data()[r * k + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; k];
        for r in 0..rows {
            for c in 0..k {
                let d = features.data()[r * k + c] - mean[c];
                var[c] += d * d;
            }
        }
        let alpha = store.get_mut(self.alpha_raw).value.data_mut();
        for c in 0..k {
            alpha[c] = 0.1 * (var[c] / rows as f64).sqrt();
        }
        Ok(())
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let mut n = store.get(self.alpha_raw).value.len();
        if let Denoiser::Mlp(layers) = &self.g {
            for l in layers {
                n += store.get(l.weight).value.len() + store.get(l.bias).value.len();
            }
        }
        n
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: "tbm",
            reason: format!("lambda must be finite and >= 0, got {lambda}"),
        })
    }
}

/// `max(alpha_raw, 0)` without a tape.
pub fn alpha_effective(store: &ParamStore, state: &TbmState) -> Vec<f64> {
    store.get(state.alpha_raw).value.data().iter().map(|a| a.max(0.0)).collect()
}

/// Where the noise for one call comes from.
#[derive(Debug)]
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    Mean,
}

fn denoise(g: &mut Graph, bound: &Bound, state: &TbmState, x: Var) -> Result<Var> {
    match &state.g {
        Denoiser::Identity => Ok(x),
        Denoiser::Mlp(layers) => {
            let mut h = x;
            for (i, l) in layers.iter().enumerate() {
                h = g.matmul(h, bound.get(l.weight))?;
                h = g.add(h, bound.get(l.bias))?;
                if i < 2 {
                    h = g.relu(h)?;
                }
            }
            Ok(h)
        }
    }
}

/// Run the module on `f` (any shape with last dimension `K`). With
/// `mc_samples > 1` the output is the mean of `R̂` over independent draws;
/// the trace records the first draw.
pub fn tbm_forward(
    g: &mut Graph,
    bound: &Bound,
    state: &TbmState,
    f: Var,
    mut noise: Noise<'_>,
    mc_samples: usize,
) -> Result<(Var, TbmTrace)> {
    let shape = g.shape(f).to_vec();
    if shape.last() != Some(&state.dim) {
        return Err(TensorError::ShapeMismatch {
            op: "tbm",
            lhs: shape,
            rhs: vec![state.dim],
        });
    }
    if mc_samples == 0 {
        return Err(TensorError::Invalid {
            op: "tbm",
            reason: "mc_samples must be at least 1".into(),
        });
    }
    let alpha = g.relu(bound.get(state.alpha_raw))?;
    let mut first: Option<TbmTrace> = None;
    let mut acc: Option<Var> = None;
    for _ in 0..mc_samples {
        let s = match &mut noise {
            Noise::Sample(rng) => Tensor::randn(&shape, 1.0, rng),
            Noise::Mean => Tensor::zeros(&shape),
        };
        let s = g.constant(s)?;
        let q = g.mul(s, alpha)?;
        let i = g.add(f, q)?;
        let g_in = match state.alpha_grad {
            AlphaGrad::Full => i,
            AlphaGrad::ExplicitTerm => {
                let qd = g.detach(q);
                g.add(f, qd)?
            }
        };
        let f_hat = denoise(g, bound, state, g_in)?;
        let two = g.scale(f_hat, 2.0)?;
        let c = g.sub(two, i)?;
        let c = g.sub(c, f)?;
        let r_hat = g.add(f, c)?;
        if first.is_none() {
            first = Some(TbmTrace { f, q, i, f_hat, r_hat });
        }
        acc = Some(match acc {
            None => r_hat,
            Some(a) => g.add(a, r_hat)?,
        });
    }
    let mut out = acc.expect("at least one sample");
    if mc_samples > 1 {
        out = g.scale(out, 1.0 / mc_samples as f64)?;
    }
    Ok((out, first.expect("at least one sample")))
}

/// `λ · mean_tokens Σ_k (F_k − F̂_k)²` with `F` detached as the target.
pub fn tbm_recon_loss(g: &mut Graph, f: Var, f_hat: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let sf = g.shape(f).to_vec();
    if sf != g.shape(f_hat) {
        return Err(TensorError::ShapeMismatch {
            op: "tbm.recon",
            lhs: sf,
            rhs: g.shape(f_hat).to_vec(),
        });
    }
    let k = *sf.last().unwrap_or(&1);
    let tokens = if k == 0 { 0 } else { g.value(f).len() / k };
    let target = g.detach(f);
    let d = g.sub(target, f_hat)?;
    let ss = g.sum_squares(d)?;
    let scale = if tokens == 0 { 0.0 } else { lambda / tokens as f64 };
    g.scale(ss, scale)
}

/// Largest `|R̂ − (2F̂ − I)|` relative to the operand magnitudes; zero up to
/// rounding by construction.
pub fn boost_identity_residual(g: &Graph, trace: &TbmTrace) -> f64 {
    let r = g.value(trace.r_hat).data();
    let fh = g.value(trace.f_hat).data();
    let i = g.value(trace.i).data();
    let f = g.value(trace.f).data();
    r.iter()
        .zip(fh)
        .zip(i)
        .zip(f)
        .map(|(((r, fh), i), f)| {
            let scale = 1.0 + fh.abs() * 2.0 + i.abs() + f.abs();
            (r - (2.0 * fh - i)).abs() / scale
        })
        .fold(0.0, f64::max)
}
