//! Procedural labelled images and toy versions of common image corruptions.
//!
//! Every image is a pure function of `(seed, split, index)`: it gets its own
//! PRNG stream, so generation parallelises per image without changing bits.

mod corrupt;
mod shapes;

pub use corrupt::{
    apply, corrupt, disk_kernel, Applied, CorruptionKind, CorruptionSpec, Severity, BRIGHTNESS_SHIFT, CONTRAST_FACTOR,
    DEFOCUS_RADIUS, GAUSSIAN_SIGMA, IMPULSE_RATE, SHOT_SCALE,
};
pub use shapes::{render, NUM_RECIPES, RECIPE_NAMES};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::ExecMode;
use crate::tensor::{read_container, write_container, Container, ContainerError, Rng, Stream, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub split: Split,
}

impl DataSpec {
    pub fn new(n: usize, classes: usize, split: Split) -> Self {
        Self {
            n,
            classes,
            image_size: 32,
            channels: 1,
            split,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 {
            return Err(DataError::Spec("N must be at least 1".into()));
        }
        if self.classes < 2 || self.classes > NUM_RECIPES {
            return Err(DataError::Spec(format!("L must lie in 2..={NUM_RECIPES}, got {}", self.classes)));
        }
        if self.classes > self.n {
            return Err(DataError::Spec(format!("L = {} exceeds N = {}", self.classes, self.n)));
        }
        if self.image_size < 4 || !(self.channels == 1 || self.channels == 3) {
            return Err(DataError::Spec("image size >= 4 and 1 or 3 channels required".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    pub seed: u64,
    /// `[N, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn image_stream(seed: u64, split: Split, index: usize) -> Rng {
    Rng::for_purpose(seed, Stream::Data, (split.tag() << 48) | index as u64)
}

/// Labels are `i mod L`, so every class gets `N/L` images (±1).
pub fn generate_dataset(spec: &DataSpec, seed: u64, exec: ExecMode) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let sz = spec.image_size;
    let plane = sz * sz;
    let per = spec.pixels();
    let ch = spec.channels;
    let split = spec.split;
    let classes = spec.classes;
    let imgs = exec.map_range(spec.n, |i| {
        let mut rng = image_stream(seed, split, i);
        let mut out = vec![0.0; per];
        render(i % classes, sz, &mut rng, &mut out[..plane]);
        if ch == 3 {
            let gains: Vec<f64> = (0..3).map(|_| 0.7 + 0.3 * rng.uniform()).collect();
            let base = out[..plane].to_vec();
            for (c, gain) in gains.iter().enumerate() {
                for (o, b) in out[c * plane..(c + 1) * plane].iter_mut().zip(&base) {
                    *o = b * gain;
                }
            }
        }
        out
    });
    let data = imgs.concat();
    Ok(SyntheticDataset {
        images: Tensor::new(vec![spec.n, ch, sz, sz], data).expect("consistent sizes"),
        labels: (0..spec.n).map(|i| i % classes).collect(),
        spec: spec.clone(),
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.spec.pixels();
        &self.images.data()[i * p..(i + 1) * p]
    }

    /// `[B, C, H, W]` batch of the given indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(idx.len() * self.spec.pixels());
        for &i in idx {
            out.extend_from_slice(self.image(i));
        }
        let s = &self.spec;
        Tensor::new(vec![idx.len(), s.channels, s.image_size, s.image_size], out).expect("consistent sizes")
    }

    /// A corrupted copy. Image `i` draws from corruption stream
    /// `(tag, i)`; `tag` separates epochs and splits.
    pub fn corrupted(&self, spec: &CorruptionSpec, seed: u64, tag: u64, exec: ExecMode) -> Result<Self, DataError> {
        spec.validate()?;
        let (ch, sz) = (self.spec.channels, self.spec.image_size);
        let imgs = exec.map_range(self.len(), |i| {
            let mut img = self.image(i).to_vec();
            let mut rng = corruption_stream(seed, tag, i);
            corrupt(&mut img, ch, sz, spec, &mut rng);
            img
        });
        let mut out = self.clone();
        out.images = Tensor::new(self.images.shape().to_vec(), imgs.concat()).expect("consistent sizes");
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": "dataset",
            "spec": self.spec,
            "seed": self.seed,
        });
        let mut c = Container::new(meta);
        c.push("images", self.images.clone());
        c.push("labels", Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let bad = |m: &str| DataError::Spec(format!("dataset cache: {m}"));
        let spec: DataSpec = serde_json::from_value(c.meta["spec"].clone()).map_err(|e| bad(&e.to_string()))?;
        let seed = c.meta["seed"].as_u64().ok_or_else(|| bad("missing seed"))?;
        let images = c.get("images").ok_or_else(|| bad("missing images"))?.clone();
        let labels = c
            .get("labels")
            .ok_or_else(|| bad("missing labels"))?
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        Ok(Self {
            spec,
            seed,
            images,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(write_container(path, &self.to_container())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_container(&read_container(path)?)
    }
}

pub fn corruption_stream(seed: u64, tag: u64, index: usize) -> Rng {
    Rng::for_purpose(seed, Stream::Corruption, (tag << 32) | index as u64)
}

/// Tag used for the fully-corrupted evaluation copy of a test split.
pub const EVAL_CORRUPTION_TAG: u64 = 0xFF_FFFF;
