use crate::tensor::{Result, Rng, Tensor, TensorError};

/// Split `[C, H, W]` images (batched as `[B, C, H, W]`) into
/// `[B, T, P·P·C]` patch rows, row-major over the patch grid. Inside a
/// patch the layout is `(c, y, x)`.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(TensorError::InvalidShape {
            op: "patchify",
            shape: s.to_vec(),
            reason: format!("expected [B, C, H, W] divisible by patch {patch}"),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let t = gh * gw;
    let d = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ci) * h + gy * patch + y) * w + gx * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, t, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    let s = tokens.shape();
    let bad = || TensorError::InvalidShape {
        op: "unpatchify",
        shape: s.to_vec(),
        reason: format!("does not tile a {channels}x{height}x{width} image with patch {patch}"),
    };
    if s.len() != 3 || patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(bad());
    }
    let (gh, gw) = (height / patch, width / patch);
    if s[1] != gh * gw || s[2] != patch * patch * channels {
        return Err(bad());
    }
    let b = s[0];
    let mut out = vec![0.0; b * channels * height * width];
    let src = tokens.data();
    let mut k = 0;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..channels {
                    for y in 0..patch {
                        let row = ((bi * channels + ci) * height + gy * patch + y) * width + gx * patch;
                        out[row..row + patch].copy_from_slice(&src[k..k + patch]);
                        k += patch;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, height, width], out)
}

/// Random split of `T` token positions into masked and visible sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    /// Sorted ascending.
    pub visible: Vec<usize>,
}

impl MaskPlan {
    pub fn tokens(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// Nothing masked.
    pub fn full(t: usize) -> Self {
        Self {
            ratio: 0.0,
            masked: Vec::new(),
            visible: (0..t).collect(),
        }
    }
}

pub fn masked_count(t: usize, ratio: f64) -> usize {
    ((ratio * t as f64).round() as usize).min(t)
}

/// Uniform sampling of `round(ratio·T)` masked positions without replacement.
pub fn sample_mask(t: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TensorError::Invalid {
            op: "sample_mask",
            reason: format!("ratio must lie in [0, 1), got {ratio}"),
        });
    }
    let m = masked_count(t, ratio);
    let mut masked = rng.choose_indices(t, m);
    masked.sort_unstable();
    let mut is_masked = vec![false; t];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..t).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        ratio,
        masked,
        visible,
    })
}
