//! Shared helpers for integration tests: central finite-difference gradient
//! checks and tiny model / experiment configurations.
#![allow(dead_code)]

use token_boost::tbm::tbm_recon_loss;
use token_boost::tensor::{Bound, Graph, ParamStore, Rng, Tensor, Var};
use token_boost::vt::{gather_tokens, mae_loss, patchify, sample_mask, EncoderConfig, MaskPlan, TbmNoise, Vit};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_POINTS: usize = 10;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps gradients that are zero
/// up to rounding from dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub coords: usize,
}

impl GradCheck {
    fn record(&mut self, a: f64, n: f64) {
        self.max_rel = self.max_rel.max(rel_err(a, n));
        self.coords += 1;
    }

    pub fn pass(&self) -> bool {
        self.coords > 0 && self.max_rel < FD_TOL
    }
}

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn inputs(shapes: &[Vec<usize>], rng: &mut Rng, away_from_zero: bool) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::randn(s, 1.0, rng);
            if away_from_zero {
                for x in t.data_mut() {
                    *x += 0.2 * x.signum();
                }
            }
            t
        })
        .collect()
}

/// Scalarise `out` with fixed random weights so every output element
/// contributes a distinct amount.
fn scalarise(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    if g.value(out).len() == 1 && g.shape(out).is_empty() {
        return out;
    }
    let w = g.constant(weights.clone().reshaped(g.shape(out)).unwrap()).unwrap();
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

fn eval(build: &Build, xs: &[Tensor], weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false).unwrap()).collect();
    let out = build(&mut g, &vs);
    let s = scalarise(&mut g, out, weights);
    g.value(s).item()
}

/// Compare reverse-mode gradients of `build` against central differences at
/// `FD_POINTS` random inputs, every coordinate of every input.
pub fn check_op(shapes: &[Vec<usize>], away_from_zero: bool, seed: u64, build: &Build) -> GradCheck {
    let mut res = GradCheck::default();
    for p in 0..FD_POINTS {
        let mut rng = Rng::new(seed, p as u64);
        let xs = inputs(shapes, &mut rng, away_from_zero);
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vs);
        let n_out = g.value(out).len();
        let weights = Tensor::randn(&[n_out], 1.0, &mut rng);
        let s = scalarise(&mut g, out, &weights);
        g.backward(s).unwrap();
        let grads: Vec<Vec<f64>> = vs
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        for (i, x) in xs.iter().enumerate() {
            for j in 0..x.len() {
                let mut hi = xs.to_vec();
                hi[i].data_mut()[j] += FD_STEP;
                let mut lo = xs.to_vec();
                lo[i].data_mut()[j] -= FD_STEP;
                let num = (eval(build, &hi, &weights) - eval(build, &lo, &weights)) / (2.0 * FD_STEP);
                res.record(grads[i][j], num);
            }
        }
    }
    res
}

/// Every differentiable primitive with small representative shapes.
pub fn primitive_checks() -> Vec<(&'static str, GradCheck)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, shapes: Vec<Vec<usize>>, kink: bool, f: Box<Build>| {
        out.push((name, check_op(&shapes, kink, name.len() as u64, f.as_ref())));
    };
    run("matmul_shared", vec![vec![2, 3, 4], vec![4, 5]], false, Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()));
    run("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], false, Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()));
    run("add_broadcast", vec![vec![2, 3, 4], vec![4]], false, Box::new(|g, v| g.add(v[0], v[1]).unwrap()));
    run("sub", vec![vec![3, 4], vec![3, 4]], false, Box::new(|g, v| g.sub(v[0], v[1]).unwrap()));
    run("mul_broadcast", vec![vec![2, 3, 4], vec![4]], false, Box::new(|g, v| g.mul(v[0], v[1]).unwrap()));
    run("scale", vec![vec![5]], false, Box::new(|g, v| g.scale(v[0], -1.7).unwrap()));
    run("relu", vec![vec![3, 4]], true, Box::new(|g, v| g.relu(v[0]).unwrap()));
    run("gelu", vec![vec![3, 4]], false, Box::new(|g, v| g.gelu(v[0]).unwrap()));
    run("softmax", vec![vec![3, 5]], false, Box::new(|g, v| g.softmax(v[0]).unwrap()));
    run(
        "layer_norm",
        vec![vec![2, 3, 6], vec![6], vec![6]],
        false,
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
    );
    run("reshape", vec![vec![2, 6]], false, Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap()));
    run("permute", vec![vec![2, 3, 4]], false, Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    run("transpose", vec![vec![2, 3, 4]], false, Box::new(|g, v| g.transpose(v[0], 1, 2).unwrap()));
    run("slice_last", vec![vec![2, 3, 6]], false, Box::new(|g, v| g.slice_last(v[0], 2, 3).unwrap()));
    run(
        "gather_rows",
        vec![vec![2, 5, 3]],
        false,
        Box::new(|g, v| g.gather_rows(v[0], &[vec![4, 0, 2], vec![1, 1, 3]]).unwrap()),
    );
    run("concat_rows", vec![vec![2, 2, 3], vec![2, 3, 3]], false, Box::new(|g, v| g.concat_rows(v[0], v[1]).unwrap()));
    run("sum", vec![vec![3, 4]], false, Box::new(|g, v| g.sum(v[0]).unwrap()));
    run("mean", vec![vec![3, 4]], false, Box::new(|g, v| g.mean(v[0]).unwrap()));
    run("mean_axis", vec![vec![2, 3, 4]], false, Box::new(|g, v| g.mean_axis(v[0], 1).unwrap()));
    run("sum_squares", vec![vec![3, 4]], false, Box::new(|g, v| g.sum_squares(v[0]).unwrap()));
    run("cross_entropy", vec![vec![4, 5]], false, Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]).unwrap()));
    out
}

/// Tiny encoder/decoder with TBMs after both blocks.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        channels: 1,
        patch: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        tbm_layers: vec![0, 1],
        decoder_depth: 1,
        decoder_dim: 8,
        decoder_heads: 2,
        ..EncoderConfig::default()
    }
}

/// `λ/tokens · Σ (target − F̂)²` with `target` a constant: the stop-gradient
/// reading of the reconstruction loss, written out independently.
pub fn recon_with_fixed_target(g: &mut Graph, target: &Tensor, f_hat: Var, lambda: f64) -> Var {
    let k = *target.shape().last().unwrap();
    let tokens = target.len() / k;
    let t = g.constant(target.clone()).unwrap();
    let d = g.sub(t, f_hat).unwrap();
    let ss = g.sum_squares(d).unwrap();
    g.scale(ss, lambda / tokens as f64).unwrap()
}

/// A scalar loss over a bound store. With `targets = None` it runs the code
/// under test and returns the detached-target variables it used; with
/// `Some(t)` it must use `t` as constant targets instead.
pub type StoreLoss = dyn Fn(&mut Graph, &Bound, Option<&[Tensor]>) -> (Var, Vec<Var>);

/// Gradients of `loss` w.r.t. the store against central differences, with
/// detached targets pinned at their unperturbed values.
pub fn check_store(store: &mut ParamStore, pick: &dyn Fn(&str, usize, &mut Rng) -> Vec<usize>, rng: &mut Rng, loss: &StoreLoss) -> GradCheck {
    let mut res = GradCheck::default();
    let (grads, targets) = {
        let mut g = Graph::new();
        let b = g.bind(store, true).unwrap();
        let (l, tv) = loss(&mut g, &b, None);
        let targets: Vec<Tensor> = tv.iter().map(|&v| g.value(v).clone()).collect();
        g.backward(l).unwrap();
        (g.param_grads(&b), targets)
    };
    let value = |store: &ParamStore| {
        let mut g = Graph::new();
        let b = g.bind(store, false).unwrap();
        let (l, _) = loss(&mut g, &b, Some(&targets));
        g.value(l).item()
    };
    let meta: Vec<(String, usize)> = store.iter().map(|p| (p.name.clone(), p.value.len())).collect();
    for (i, (name, len)) in meta.iter().enumerate() {
        for j in pick(name, *len, rng) {
            let id = store.find(name).unwrap();
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let hi = value(store);
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let lo = value(store);
            store.get_mut(id).value.data_mut()[j] = orig;
            res.record(grads[i][j], (hi - lo) / (2.0 * FD_STEP));
        }
    }
    res
}

/// Full MAE + Σ recon loss of the ViT with TBMs: at each of `FD_POINTS`
/// random initialisations, every `alpha_raw` coordinate plus
/// `coords_per_param` random coordinates of every other parameter.
pub fn check_vit(coords_per_param: usize) -> GradCheck {
    let mut total = GradCheck::default();
    let cfg = tiny_encoder();
    for p in 0..FD_POINTS as u64 {
        let mut vit = Vit::new(cfg.clone(), 0.7, p).unwrap();
        let mut rng = Rng::new(1000 + p, 0);
        // Move alpha off zero so the noise path is active.
        for prm in vit.store.iter_mut().filter(|q| q.name.ends_with("alpha_raw")) {
            for x in prm.value.data_mut() {
                *x = 0.1 + 0.4 * rng.uniform();
            }
        }
        let images = Tensor::uniform(&[2, 1, cfg.image_size, cfg.image_size], 1.0, &mut rng);
        let plans: Vec<MaskPlan> = (0..2).map(|_| sample_mask(cfg.tokens(), 0.5, &mut rng).unwrap()).collect();
        let patches = patchify(&images, cfg.patch).unwrap();
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
        let model = vit.clone();
        let loss = move |g: &mut Graph, b: &Bound, fixed: Option<&[Tensor]>| {
            let mut noise = Rng::new(p, 77);
            let (latent, traces) = model.encode(g, b, &patches, &visible, TbmNoise::Sample(&mut noise)).unwrap();
            let pred = model.decode(g, b, latent, &plans).unwrap();
            let target = g.constant(gather_tokens(&patches, &masked).unwrap()).unwrap();
            let mut total = mae_loss(g, pred, target).unwrap();
            for (j, (tr, st)) in traces.iter().zip(&model.tbms).enumerate() {
                let r = match fixed {
                    None => tbm_recon_loss(g, tr.f, tr.f_hat, st.lambda).unwrap(),
                    Some(t) => recon_with_fixed_target(g, &t[j], tr.f_hat, st.lambda),
                };
                total = g.add(total, r).unwrap();
            }
            (total, traces.iter().map(|t| t.f).collect())
        };
        let pick = |name: &str, len: usize, rng: &mut Rng| -> Vec<usize> {
            if name.ends_with("alpha_raw") {
                (0..len).collect()
            } else {
                (0..coords_per_param.min(len)).map(|_| rng.below(len)).collect()
            }
        };
        let r = check_store(&mut vit.store, &pick, &mut rng, &loss);
        total.max_rel = total.max_rel.max(r.max_rel);
        total.coords += r.coords;
    }
    total
}
