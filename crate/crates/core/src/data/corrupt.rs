use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Identity,
}

impl CorruptionKind {
    /// The six real corruptions (everything but `Identity`).
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Identity => "identity",
        }
    }

    /// Severity parameter for levels 1..=5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA,
            CorruptionKind::ShotNoise => SHOT_SCALE,
            CorruptionKind::ImpulseNoise => IMPULSE_RATE,
            CorruptionKind::DefocusBlur => DEFOCUS_RADIUS,
            CorruptionKind::Brightness => BRIGHTNESS_SHIFT,
            CorruptionKind::Contrast => CONTRAST_FACTOR,
            CorruptionKind::Identity => [0.0; 5],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        CorruptionKind::ALL
            .iter()
            .chain([CorruptionKind::Identity].iter())
            .find(|k| k.name() == s.trim())
            .copied()
            .ok_or_else(|| DataError::UnknownCorruption(s.to_string()))
    }
}

/// Additive noise std.
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Photon scale `c`: output is `Poisson(x·c)/c`, so smaller is noisier.
pub const SHOT_SCALE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
/// Fraction of pixels replaced by salt (1) or pepper (0).
pub const IMPULSE_RATE: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
/// Disk kernel radius in pixels.
pub const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
/// Additive intensity shift.
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Contrast factor around the image mean.
pub const CONTRAST_FACTOR: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Fixed(u8),
    /// Uniform over 1..=5 per image.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kinds: Vec<CorruptionKind>,
    pub severity: Severity,
    pub apply_prob: f64,
}

impl CorruptionSpec {
    pub fn new(kinds: Vec<CorruptionKind>, severity: Severity, apply_prob: f64) -> Result<Self, DataError> {
        let spec = Self {
            kinds,
            severity,
            apply_prob,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All six corruptions, random severity, applied with probability `p`.
    pub fn all(apply_prob: f64) -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severity: Severity::Uniform,
            apply_prob,
        }
    }

    pub fn none() -> Self {
        Self {
            kinds: vec![CorruptionKind::Identity],
            severity: Severity::Uniform,
            apply_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.kinds.is_empty() {
            return Err(DataError::Spec("corruption kind list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(DataError::Spec(format!("apply_prob {} outside [0, 1]", self.apply_prob)));
        }
        if let Severity::Fixed(s) = self.severity {
            if !(1..=5).contains(&s) {
                return Err(DataError::Spec(format!("severity {s} outside 1..=5")));
            }
        }
        Ok(())
    }

    /// Parse a comma-separated kind list such as `gaussian_noise,contrast`.
    pub fn parse_kinds(list: &str) -> Result<Vec<CorruptionKind>, DataError> {
        if list.trim() == "all" {
            return Ok(CorruptionKind::ALL.to_vec());
        }
        list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
    }
}

/// Which corruption (if any) was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Applied {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Corrupt one `[C, H, W]` image in place. Draw order is fixed: gate, kind,
/// severity, then the corruption's own randomness.
pub fn corrupt(img: &mut [f64], channels: usize, size: usize, spec: &CorruptionSpec, rng: &mut Rng) -> Option<Applied> {
    let gate = rng.uniform();
    if gate >= spec.apply_prob {
        return None;
    }
    let kind = spec.kinds[rng.below(spec.kinds.len())];
    let severity = match spec.severity {
        Severity::Fixed(s) => s,
        Severity::Uniform => 1 + rng.below(5) as u8,
    };
    apply(img, channels, size, kind, severity, rng);
    Some(Applied { kind, severity })
}

/// Apply one corruption at a given severity (1..=5), clamping to `[0, 1]`.
pub fn apply(img: &mut [f64], channels: usize, size: usize, kind: CorruptionKind, severity: u8, rng: &mut Rng) {
    let p = kind.table()[(severity.clamp(1, 5) - 1) as usize];
    match kind {
        CorruptionKind::Identity => return,
        CorruptionKind::GaussianNoise => {
            for v in img.iter_mut() {
                *v += p * rng.normal();
            }
        }
        CorruptionKind::ShotNoise => {
            for v in img.iter_mut() {
                *v = rng.poisson(v.max(0.0) * p) / p;
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in img.iter_mut() {
                let hit = rng.uniform();
                let salt = rng.uniform();
                if hit < p {
                    *v = if salt < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            let plane = size * size;
            for c in 0..channels {
                let blurred = disk_blur(&img[c * plane..(c + 1) * plane], size, p);
                img[c * plane..(c + 1) * plane].copy_from_slice(&blurred);
            }
        }
        CorruptionKind::Brightness => {
            for v in img.iter_mut() {
                *v += p;
            }
        }
        CorruptionKind::Contrast => {
            let plane = size * size;
            for c in 0..channels {
                let ch = &mut img[c * plane..(c + 1) * plane];
                let mean = ch.iter().sum::<f64>() / plane as f64;
                for v in ch.iter_mut() {
                    *v = (*v - mean) * p + mean;
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Offsets within a disk of radius `r`, uniformly weighted.
pub fn disk_kernel(r: f64) -> Vec<(isize, isize)> {
    let ri = r.floor() as isize;
    let mut k = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r * r + 1e-9 {
                k.push((dx, dy));
            }
        }
    }
    k
}

/// Disk average with edge clamping.
fn disk_blur(ch: &[f64], size: usize, r: f64) -> Vec<f64> {
    let kernel = disk_kernel(r);
    let w = 1.0 / kernel.len() as f64;
    let n = size as isize;
    let mut out = vec![0.0; ch.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for &(dx, dy) in &kernel {
                let xx = (x + dx).clamp(0, n - 1);
                let yy = (y + dy).clamp(0, n - 1);
                acc += ch[(yy * n + xx) as usize];
            }
            out[(y * n + x) as usize] = acc * w;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_and_print() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!("snow".parse::<CorruptionKind>().is_err());
        assert_eq!(CorruptionSpec::parse_kinds("shot_noise, contrast").unwrap().len(), 2);
        assert_eq!(CorruptionSpec::parse_kinds("all").unwrap().len(), 6);
    }

    #[test]
    fn tables_are_monotone_in_harm() {
        for t in [GAUSSIAN_SIGMA, IMPULSE_RATE, DEFOCUS_RADIUS, BRIGHTNESS_SHIFT] {
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
        for t in [SHOT_SCALE, CONTRAST_FACTOR] {
            assert!(t.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn disk_kernel_sizes() {
        let sizes: Vec<usize> = DEFOCUS_RADIUS.iter().map(|&r| disk_kernel(r).len()).collect();
        assert_eq!(sizes, vec![5, 9, 13, 21, 29]);
    }

    #[test]
    fn identity_and_zero_probability_are_bitwise_no_ops() {
        let mut rng = Rng::new(1, 0);
        let orig: Vec<f64> = (0..64).map(|i| (i as f64 / 64.0).sqrt()).collect();
        let mut a = orig.clone();
        apply(&mut a, 1, 8, CorruptionKind::Identity, 3, &mut rng);
        assert_eq!(a, orig);
        let mut b = orig.clone();
        assert!(corrupt(&mut b, 1, 8, &CorruptionSpec::all(0.0), &mut rng).is_none());
        assert_eq!(b, orig);
    }

    #[test]
    fn invalid_specs() {
        assert!(CorruptionSpec::new(vec![], Severity::Uniform, 0.5).is_err());
        assert!(CorruptionSpec::new(vec![CorruptionKind::Contrast], Severity::Fixed(6), 0.5).is_err());
        assert!(CorruptionSpec::new(vec![CorruptionKind::Contrast], Severity::Fixed(1), 1.5).is_err());
    }
}
