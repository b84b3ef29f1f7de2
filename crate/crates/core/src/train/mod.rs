//! Training regimes: masked-autoencoder pre-training with TBM
//! reconstruction losses, linear probing of the frozen encoder, supervised
//! training, and the ablation matrix over TBM placement and `λ`.
//!
//! A run is sequential over steps. Within a step the batch is cut into
//! fixed-size shards that are evaluated in parallel and reduced in shard
//! order, so the same seed gives the same bits in either execution mode.

mod ablate;
mod config;
mod metrics;
mod pretrain;
mod probe;
pub mod stats;

pub use ablate::{ablate, default_cells, write_results_csv, AblationCell, AblationTable, CellRun, CellSummary};
pub use config::{AlphaInit, ConfigError, DataConfig, ExperimentConfig, Regime, Schedule};
pub use metrics::{read_metrics, MetricRecord, MetricsLog};
pub use pretrain::{
    checkpoint_path, latest_checkpoint, load_checkpoint, pretrain, save_checkpoint, Checkpoint, PretrainOptions,
    PretrainOutput, FINAL_CHECKPOINT,
};
pub use probe::{encoder_fingerprint, extract_features, linear_probe, supervised_grads, supervised_train, ProbeResult, SupervisedResult};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::{generate_dataset, DataError, DataSpec, Split, SyntheticDataset};
use crate::exec::ExecMode;
use crate::tensor::{ContainerError, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {metric} at step {step}; snapshot in {}", snapshot.display())]
    NonFinite { step: u64, metric: String, snapshot: PathBuf },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Corruption tag for the partially corrupted probe-training copy.
pub const PROBE_CORRUPTION_TAG: u64 = 0xFF_FFFE;

/// Train and test splits for a config (independent of the run seed).
pub fn datasets(cfg: &ExperimentConfig, exec: ExecMode) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let mk = |n, split| DataSpec {
        n,
        classes: cfg.data.classes,
        image_size: cfg.encoder.image_size,
        channels: cfg.encoder.channels,
        split,
    };
    let train = generate_dataset(&mk(cfg.data.n_train, Split::Train), cfg.data.seed, exec)?;
    let test = generate_dataset(&mk(cfg.data.n_test, Split::Test), cfg.data.seed, exec)?;
    Ok((train, test))
}

/// Split a batch into consecutive shards of at most `size` images.
pub(crate) fn shards(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Elementwise sum of per-shard gradients, in shard order.
pub(crate) fn reduce_grads(parts: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (a, b) in acc.iter_mut().zip(p) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    acc
}

/// Batches of one epoch: a seeded permutation cut into chunks of `batch`.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut crate::tensor::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_reduce_in_order() {
        let r = reduce_grads(vec![vec![vec![1.0, 2.0]], vec![vec![0.5, 0.25]]]);
        assert_eq!(r, vec![vec![1.5, 2.25]]);
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = crate::tensor::Rng::new(1, 2);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(steps_per_epoch(10, 4), 3);
    }
}
