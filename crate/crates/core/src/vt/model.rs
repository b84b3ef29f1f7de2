use crate::tbm::{tbm_forward, Noise, TbmState, TbmTrace};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Rng, Stream, Tensor, TensorError, Var};

use super::{EncoderConfig, MaskPlan, TbmPlacement};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

fn xavier(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Linear {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Linear {
        weight: store.add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng), true),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false),
    }
}

fn norm(store: &mut ParamStore, name: &str, dim: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
    }
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: norm(store, &format!("{name}.ln1"), dim),
            qkv: xavier(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
            proj: xavier(store, &format!("{name}.attn.proj"), dim, dim, rng),
            ln2: norm(store, &format!("{name}.ln2"), dim),
            fc1: xavier(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, rng),
            fc2: xavier(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, rng),
            heads,
        }
    }

    fn attend(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (bsz, t, k) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = k / h;
        let y = layer_norm(g, b, self.ln1, x)?;
        let qkv = linear(g, b, self.qkv, y)?;
        let split = |g: &mut Graph, i: usize| -> Result<Var> {
            let part = g.slice_last(qkv, i * k, k)?;
            let part = g.reshape(part, &[bsz, t, h, dh])?;
            let part = g.permute(part, &[0, 2, 1, 3])?;
            g.reshape(part, &[bsz * h, t, dh])
        };
        let q = split(g, 0)?;
        let kk = split(g, 1)?;
        let v = split(g, 2)?;
        let kt = g.transpose(kk, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.reshape(o, &[bsz, h, t, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bsz, t, k])?;
        let o = linear(g, b, self.proj, o)?;
        g.add(x, o)
    }

    fn mlp(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = layer_norm(g, b, self.ln2, x)?;
        let y = linear(g, b, self.fc1, y)?;
        let y = g.gelu(y)?;
        let y = linear(g, b, self.fc2, y)?;
        g.add(x, y)
    }
}

pub fn linear(g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.get(l.weight))?;
    g.add(y, b.get(l.bias))
}

fn layer_norm(g: &mut Graph, b: &Bound, n: Norm, x: Var) -> Result<Var> {
    g.layer_norm(x, b.get(n.gamma), b.get(n.beta))
}

/// Fixed 1-D sinusoidal table `[T, K]`.
pub fn sincos_table(t: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * k];
    for pos in 0..t {
        for i in 0..k {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / k as f64);
            let a = pos as f64 * freq;
            out[pos * k + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Per-sample row selection from a `[B, T, D]` tensor.
pub fn gather_tokens(x: &Tensor, rows: &[Vec<usize>]) -> Result<Tensor> {
    let s = x.shape();
    let (t, d) = (s[1], s[2]);
    let n = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(rows.len() * n * d);
    for (bi, r) in rows.iter().enumerate() {
        for &i in r {
            let at = (bi * t + i) * d;
            out.extend_from_slice(&x.data()[at..at + d]);
        }
    }
    Tensor::new(vec![rows.len(), n, d], out)
}

fn pos_for(table: &[f64], k: usize, rows: &[Vec<usize>]) -> Result<Tensor> {
    let n = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(rows.len() * n * k);
    for r in rows {
        for &i in r {
            out.extend_from_slice(&table[i * k..(i + 1) * k]);
        }
    }
    Tensor::new(vec![rows.len(), n, k], out)
}

/// Encoder, decoder and TBM handles over a single [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Vit {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub dec_embed: Linear,
    pub mask_token: ParamId,
    pub dec_blocks: Vec<Block>,
    pub dec_norm: Norm,
    pub dec_pred: Linear,
    /// One per entry of `cfg.tbm_layers`, same order.
    pub tbms: Vec<TbmState>,
    /// How many noise draws each TBM averages over.
    pub mc_samples: usize,
    enc_pos: Vec<f64>,
    dec_pos: Vec<f64>,
}

/// How TBM noise is drawn for one forward pass.
pub enum TbmNoise<'a> {
    Sample(&'a mut Rng),
    Mean,
}

impl Vit {
    /// Build and initialise. Encoder/decoder weights come from init stream 0
    /// and each TBM from its own stream, so adding TBMs leaves every other
    /// initial weight untouched.
    pub fn new(cfg: EncoderConfig, lambda: f64, seed: u64) -> Result<Self> {
        cfg.validate().map_err(|reason| TensorError::Invalid { op: "vit", reason })?;
        let mut store = ParamStore::new();
        let mut rng = Rng::for_purpose(seed, Stream::Init, 0);
        let k = cfg.dim;
        let pd = cfg.patch_dim();
        let patch_embed = xavier(&mut store, "patch_embed", pd, k, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), k, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect();
        let enc_norm = norm(&mut store, "norm", k);
        let kd = cfg.decoder_dim;
        let dec_embed = xavier(&mut store, "decoder.embed", k, kd, &mut rng);
        let mask_token = store.add("decoder.mask_token", Tensor::randn(&[kd], 0.02, &mut rng), false);
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| Block::new(&mut store, &format!("decoder.blocks.{i}"), kd, cfg.decoder_heads, cfg.mlp_ratio, &mut rng))
            .collect();
        let dec_norm = norm(&mut store, "decoder.norm", kd);
        let dec_pred = xavier(&mut store, "decoder.pred", kd, pd, &mut rng);
        let mut tbms = Vec::new();
        for (j, &layer) in cfg.tbm_layers.iter().enumerate() {
            let mut trng = Rng::for_purpose(seed, Stream::Init, 1 + j as u64);
            let mut st = TbmState::new(&mut store, &layer.to_string(), k, cfg.tbm_hidden(), lambda, &mut trng)?;
            st.alpha_grad = cfg.alpha_grad;
            tbms.push(st);
        }
        let t = cfg.tokens();
        Ok(Self {
            enc_pos: sincos_table(t, k),
            dec_pos: sincos_table(t, kd),
            cfg,
            store,
            patch_embed,
            blocks,
            norm: enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            dec_pred,
            tbms,
            mc_samples: 1,
        })
    }

    /// Re-wrap a loaded parameter store (names must match a fresh build).
    pub fn from_store(cfg: EncoderConfig, lambda: f64, store: ParamStore) -> Result<Self> {
        let mut v = Self::new(cfg, lambda, 0)?;
        let fresh: Vec<(String, Vec<usize>)> = v.store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        let given: Vec<(String, Vec<usize>)> = store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        if fresh != given {
            return Err(TensorError::Invalid {
                op: "vit.load",
                reason: "parameter names/shapes do not match the configuration".into(),
            });
        }
        v.store = store;
        Ok(v)
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        for t in &mut self.tbms {
            t.lambda = lambda;
        }
    }

    /// Scalars in the encoder/decoder proper and in the TBMs.
    pub fn param_counts(&self) -> (usize, usize) {
        let tbm: usize = self.store.iter().filter(|p| p.name.starts_with("tbm.")).map(|p| p.value.len()).sum();
        (self.store.numel() - tbm, tbm)
    }

    /// Encoder-only parameter count excluding decoder and TBMs.
    pub fn encoder_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|p| !p.name.starts_with("tbm.") && !p.name.starts_with("decoder."))
            .map(|p| p.value.len())
            .sum()
    }

    /// Encode the `visible` token positions of `patches` (`[B, T, P·P·C]`).
    /// Returns `[B, |visible|, K]` after the final norm, plus one trace per TBM.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        patches: &Tensor,
        visible: &[Vec<usize>],
        mut noise: TbmNoise<'_>,
    ) -> Result<(Var, Vec<TbmTrace>)> {
        let s = patches.shape();
        if s.len() != 3 || s[1] != self.cfg.tokens() || s[2] != self.cfg.patch_dim() || visible.len() != s[0] {
            return Err(TensorError::InvalidShape {
                op: "encode",
                shape: s.to_vec(),
                reason: format!(
                    "expected [B, {}, {}] with {} visible lists",
                    self.cfg.tokens(),
                    self.cfg.patch_dim(),
                    visible.len()
                ),
            });
        }
        let k = self.cfg.dim;
        let x = g.constant(gather_tokens(patches, visible)?)?;
        let x = linear(g, b, self.patch_embed, x)?;
        let pos = g.constant(pos_for(&self.enc_pos, k, visible)?)?;
        let mut x = g.add(x, pos)?;
        let mut traces = Vec::with_capacity(self.tbms.len());
        for (d, blk) in self.blocks.iter().enumerate() {
            let tbm = self.cfg.tbm_layers.iter().position(|&l| l == d).map(|j| &self.tbms[j]);
            x = blk.attend(g, b, x)?;
            if let (Some(st), TbmPlacement::AfterAttention) = (tbm, self.cfg.tbm_placement) {
                x = self.boost(g, b, st, x, &mut noise, &mut traces)?;
            }
            x = blk.mlp(g, b, x)?;
            if let (Some(st), TbmPlacement::AfterBlock) = (tbm, self.cfg.tbm_placement) {
                x = self.boost(g, b, st, x, &mut noise, &mut traces)?;
            }
        }
        let x = layer_norm(g, b, self.norm, x)?;
        Ok((x, traces))
    }

    fn boost(
        &self,
        g: &mut Graph,
        b: &Bound,
        st: &TbmState,
        x: Var,
        noise: &mut TbmNoise<'_>,
        traces: &mut Vec<TbmTrace>,
    ) -> Result<Var> {
        let n = match noise {
            TbmNoise::Sample(rng) => Noise::Sample(rng),
            TbmNoise::Mean => Noise::Mean,
        };
        let (y, tr) = tbm_forward(g, b, st, x, n, self.mc_samples)?;
        traces.push(tr);
        Ok(y)
    }

    /// Predict pixel patches at the masked positions: `[B, |masked|, P·P·C]`,
    /// in the order of each plan's `masked` list.
    pub fn decode(&self, g: &mut Graph, b: &Bound, latent: Var, plans: &[MaskPlan]) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        let tv = plans.first().map_or(0, |p| p.visible.len());
        let tm = plans.first().map_or(0, |p| p.masked.len());
        if s.len() != 3
            || s[0] != plans.len()
            || s[1] != tv
            || plans.iter().any(|p| p.visible.len() != tv || p.masked.len() != tm || p.tokens() != self.cfg.tokens())
        {
            return Err(TensorError::InvalidShape {
                op: "decode",
                shape: s,
                reason: "mask plans disagree with the latent".into(),
            });
        }
        let bsz = s[0];
        let kd = self.cfg.decoder_dim;
        let pd = self.cfg.patch_dim();
        if tm == 0 {
            return g.constant(Tensor::zeros(&[bsz, 0, pd]));
        }
        let x = linear(g, b, self.dec_embed, latent)?;
        let zeros = g.constant(Tensor::zeros(&[bsz, tm, kd]))?;
        let masks = g.add(zeros, b.get(self.mask_token))?;
        let x = g.concat_rows(x, masks)?;
        let order: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.iter().chain(&p.masked).copied().collect()).collect();
        let pos = g.constant(pos_for(&self.dec_pos, kd, &order)?)?;
        let mut x = g.add(x, pos)?;
        for blk in &self.dec_blocks {
            x = blk.attend(g, b, x)?;
            x = blk.mlp(g, b, x)?;
        }
        let x = layer_norm(g, b, self.dec_norm, x)?;
        let keep: Vec<Vec<usize>> = vec![(tv..tv + tm).collect(); bsz];
        let x = g.gather_rows(x, &keep)?;
        linear(g, b, self.dec_pred, x)
    }
}

/// Mean squared error over every element of the masked patches; 0 when
/// nothing is masked.
pub fn mae_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let n = g.value(d).len();
    let ss = g.sum_squares(d)?;
    g.scale(ss, if n == 0 { 0.0 } else { 1.0 / n as f64 })
}
