use std::path::Path;

use serde::Serialize;

use super::stats::{mean, std};
use super::{datasets, linear_probe, pretrain, ExperimentConfig, PretrainOptions, ProbeResult, Result, TrainError};
use crate::exec::ExecMode;
use crate::vt::EncoderConfig;

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub tbm_layers: Vec<usize>,
    pub lambda: f64,
}

impl AblationCell {
    pub fn new(name: &str, tbm_layers: Vec<usize>, lambda: f64) -> Self {
        Self {
            name: name.into(),
            tbm_layers,
            lambda,
        }
    }
}

/// `baseline` (no TBM); `lambda_<λ>` with TBMs at the bottom, middle and top
/// blocks for `λ ∈ {0, 0.1, 0.5, 1, 2, 5}` (`lambda_1` doubles as the
/// all-three-layers cell); and `bottom` / `mid` / `top` single-layer cells
/// at `λ = 1`.
pub fn default_cells(depth: usize) -> Vec<AblationCell> {
    let levels = EncoderConfig::three_levels(depth);
    let mut cells = vec![AblationCell::new("baseline", vec![], 0.0)];
    for l in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0] {
        cells.push(AblationCell::new(&format!("lambda_{l}"), levels.clone(), l));
    }
    for (name, layer) in [("bottom", levels[0]), ("mid", levels[1]), ("top", levels[2])] {
        cells.push(AblationCell::new(name, vec![layer], 1.0));
    }
    cells
}

#[derive(Debug, Clone, Serialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub result: Result<ProbeResult, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub n: usize,
    pub failures: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub corrupt_mean: f64,
    pub corrupt_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub runs: Vec<CellRun>,
}

impl AblationTable {
    /// Successful `(clean, corrupt)` accuracies of a cell, by seed.
    pub fn accuracies(&self, cell: &str) -> Vec<(u64, f64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| r.result.as_ref().ok().map(|p| (r.seed, p.clean_acc, p.corrupt_acc)))
            .collect()
    }

    /// Accuracies of two cells on the seeds where both succeeded:
    /// `(a_clean, b_clean, a_corrupt, b_corrupt)`.
    pub fn paired(&self, a: &str, b: &str) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let bs = self.accuracies(b);
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (seed, ac, ak) in self.accuracies(a) {
            if let Some(&(_, bc, bk)) = bs.iter().find(|x| x.0 == seed) {
                out.0.push(ac);
                out.1.push(bc);
                out.2.push(ak);
                out.3.push(bk);
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<CellSummary> {
        self.cells
            .iter()
            .map(|c| {
                let acc = self.accuracies(&c.name);
                let clean: Vec<f64> = acc.iter().map(|a| a.1).collect();
                let bad: Vec<f64> = acc.iter().map(|a| a.2).collect();
                CellSummary {
                    cell: c.name.clone(),
                    n: acc.len(),
                    failures: self.runs.iter().filter(|r| r.cell == c.name && r.result.is_err()).count(),
                    clean_mean: mean(&clean),
                    clean_std: std(&clean),
                    corrupt_mean: mean(&bad),
                    corrupt_std: std(&bad),
                }
            })
            .collect()
    }
}

/// Pre-train and probe every `(cell, seed)` into `out/<cell>/seed-<seed>`.
/// A failing run is recorded in the table and does not stop the others.
pub fn ablate(cfg: &ExperimentConfig, cells: &[AblationCell], out: &Path, exec: ExecMode) -> Result<AblationTable> {
    cfg.validate().map_err(TrainError::Config)?;
    let (train, test) = datasets(cfg, exec)?;
    let jobs: Vec<(AblationCell, u64)> = cells
        .iter()
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let runs = exec.map(jobs, |(cell, seed)| {
        let mut c = cfg.clone();
        c.encoder.tbm_layers = cell.tbm_layers.clone();
        c.lambda = cell.lambda;
        let dir = out.join(&cell.name).join(format!("seed-{seed}"));
        let result = pretrain(&c, seed, &train, &dir, &PretrainOptions::default(), exec)
            .and_then(|p| linear_probe(&c, &p.vit, seed, &train, &test, exec))
            .map_err(|e| e.to_string());
        CellRun {
            cell: cell.name,
            seed,
            result,
        }
    });
    Ok(AblationTable {
        cells: cells.to_vec(),
        runs,
    })
}

#[derive(Serialize)]
struct ResultRow<'a> {
    cell: &'a str,
    seed: u64,
    clean_acc: f64,
    corrupt_acc: f64,
}

#[derive(Serialize)]
struct PlotRow<'a> {
    x: &'a str,
    series: &'a str,
    value: f64,
}

/// `results.csv` (`cell,seed,clean_acc,corrupt_acc`; failed runs as NaN),
/// `summary.csv` (mean ± std per cell) and `plot_accuracy.csv` (long
/// format `x,series,value`).
pub fn write_results_csv(table: &AblationTable, dir: &Path) -> Result<()> {
    let io = |e: csv::Error| TrainError::Io(e.into());
    let mut w = csv::Writer::from_path(dir.join("results.csv")).map_err(io)?;
    for r in &table.runs {
        let (c, k) = r.result.as_ref().map_or((f64::NAN, f64::NAN), |p| (p.clean_acc, p.corrupt_acc));
        w.serialize(ResultRow {
            cell: &r.cell,
            seed: r.seed,
            clean_acc: c,
            corrupt_acc: k,
        })
        .map_err(io)?;
    }
    w.flush()?;
    let summary = table.summary();
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(io)?;
    for s in &summary {
        w.serialize(s).map_err(io)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("plot_accuracy.csv")).map_err(io)?;
    for s in &summary {
        for (series, value) in [("clean_acc", s.clean_mean), ("corrupt_acc", s.corrupt_mean)] {
            w.serialize(PlotRow { x: &s.cell, series, value }).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
