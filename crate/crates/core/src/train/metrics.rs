use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// One line of the newline-delimited JSON metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Append-only metrics writer. Every record is flushed as it is written so
/// an interrupted run leaves a valid prefix behind.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
    seed: u64,
}

impl MetricsLog {
    /// Open for appending. With `keep = Some(n)` the log is first cut back
    /// to its first `n` records (used when resuming from a checkpoint that
    /// was taken after `n` records).
    pub fn open(path: &Path, seed: u64, keep: Option<usize>) -> std::io::Result<Self> {
        let count = match keep {
            Some(n) => {
                let lines: Vec<String> = if path.exists() {
                    BufReader::new(File::open(path)?).lines().take(n).collect::<Result<_, _>>()?
                } else {
                    Vec::new()
                };
                if lines.len() < n {
                    return Err(std::io::Error::other(format!(
                        "{} holds {} records, checkpoint expects {n}",
                        path.display(),
                        lines.len()
                    )));
                }
                let tmp = path.with_extension("ndjson.tmp");
                let mut w = BufWriter::new(File::create(&tmp)?);
                for l in &lines {
                    writeln!(w, "{l}")?;
                }
                w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
                fs::rename(&tmp, path)?;
                n
            }
            None => {
                File::create(path)?;
                0
            }
        };
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            count,
            seed,
        })
    }

    pub fn log(&mut self, step: u64, epoch: usize, metric: &str, value: f64) -> std::io::Result<()> {
        let rec = MetricRecord {
            step,
            epoch,
            metric: metric.to_string(),
            value,
            seed: self.seed,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}
