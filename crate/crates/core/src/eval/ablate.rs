//! WD × CD ablation grid over seeds.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocols::{evaluate_held_out, MetricsReport};
use crate::error::{Error, Result};
use crate::trainer::{train_with, TrainConfig, TrainInputs, TrainOptions, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub wd: bool,
    pub cd: bool,
}

impl AblationCell {
    pub const GRID: [AblationCell; 4] = [
        AblationCell { wd: false, cd: false },
        AblationCell { wd: true, cd: false },
        AblationCell { wd: false, cd: true },
        AblationCell { wd: true, cd: true },
    ];

    pub fn name(&self) -> String {
        let s = |b: bool| if b { "on" } else { "off" };
        format!("wd-{}_cd-{}", s(self.wd), s(self.cd))
    }

    /// With both augmentations off the cell is the student-only baseline.
    pub fn configure(&self, base: &TrainConfig, seed: u64, out_dir: PathBuf) -> TrainConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.out_dir = out_dir;
        c.augment.wd_enabled = self.wd;
        c.augment.cd_enabled = self.cd;
        c.variant = if self.wd || self.cd { Variant::Lsda } else { Variant::StudentOnly };
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub cell: AblationCell,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub frame: MetricsReport,
    pub group: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub runs: usize,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub ap_mean: f64,
    pub ap_sd: f64,
    pub eer_mean: f64,
    pub eer_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub hold_out: u8,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub cells: Vec<CellSummary>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn cell(&self, wd: bool, cd: bool) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell == AblationCell { wd, cd })
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "" };
        let mut s = format!(
            "held-out domain {}, seeds {:?}\n\n| WD | CD | AUC | AP | EER |\n|----|----|-----|----|-----|\n",
            self.hold_out, self.seeds
        );
        for c in &self.cells {
            s.push_str(&format!(
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                mark(c.cell.wd),
                mark(c.cell.cd),
                c.auc_mean,
                c.auc_sd,
                c.ap_mean,
                c.ap_sd,
                c.eer_mean,
                c.eer_sd
            ));
        }
        s
    }
}

/// Train every (cell, seed) pair on shared inputs and score the held-out
/// domain. Runs are independent and execute in parallel; each run's numbers
/// depend only on its own config.
pub fn ablate(
    base: &TrainConfig,
    inputs: &TrainInputs,
    seeds: &[u64],
    cells: &[AblationCell],
    out: &Path,
) -> Result<AblationTable> {
    let hold_out = inputs
        .dataset
        .manifest
        .hold_out()
        .ok_or_else(|| Error::Precondition("ablation needs a dataset with a held-out domain".into()))?;
    if seeds.is_empty() || cells.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed and one cell".into()));
    }
    let jobs: Vec<(AblationCell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |s| (*c, *s))).collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(cell, seed)| {
            let config = cell.configure(base, seed, out.join(cell.name()).join(format!("seed-{seed}")));
            let outcome = train_with(&config, inputs, &TrainOptions { skip_validation: true, ..Default::default() })?;
            let mut reports = evaluate_held_out(&outcome.state.model.detector(), &inputs.dataset, hold_out)?;
            let group = reports.pop().expect("group report");
            let frame = reports.pop().expect("frame report");
            Ok(AblationRun { cell, seed, checkpoint: outcome.checkpoint, frame, group })
        })
        .collect::<Result<_>>()?;
    let cells = cells
        .iter()
        .map(|cell| {
            let own: Vec<&AblationRun> = runs.iter().filter(|r| r.cell == *cell).collect();
            let stat = |f: fn(&MetricsReport) -> f64| mean_sd(&own.iter().map(|r| f(&r.frame)).collect::<Vec<_>>());
            let ((auc_mean, auc_sd), (ap_mean, ap_sd), (eer_mean, eer_sd)) =
                (stat(|r| r.auc), stat(|r| r.ap), stat(|r| r.eer));
            CellSummary { cell: *cell, runs: own.len(), auc_mean, auc_sd, ap_mean, ap_sd, eer_mean, eer_sd }
        })
        .collect();
    Ok(AblationTable { hold_out, seeds: seeds.to_vec(), runs, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn off_off_is_the_student_only_baseline() {
        let base = TrainConfig::new("d".into(), "r".into(), "o".into(), 1);
        let c = AblationCell::GRID[0].configure(&base, 3, "x".into());
        assert_eq!(c.variant, Variant::StudentOnly);
        assert_eq!(c.seed, 3);
        let full = AblationCell::GRID[3].configure(&base, 3, "x".into());
        assert!(full.augment.wd_enabled && full.augment.cd_enabled && full.variant == Variant::Lsda);
        assert_eq!(AblationCell::GRID.len(), 4);
    }
}
