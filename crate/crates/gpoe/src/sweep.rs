//! Mechanism comparison: every (mechanism, seed) cell is trained once and
//! scored on every point of the test-noise grid.

use std::path::Path;

use gpoe_core::data::{Dataset, NoiseSpec};
use gpoe_core::metrics::StratumMetrics;
use gpoe_core::model::Mechanism;
use gpoe_core::train::{evaluate, train, TrainConfig};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fs::atomic_write;
use crate::report::{metric_fields, triple, RunKey, EVAL_HEADER};
use crate::settings::{parse_list, parse_value, Settings};

pub const LONG_FILE: &str = "sweep_long.csv";
pub const SUMMARY_FILE: &str = "sweep_summary.csv";
pub const SUMMARY_HEADER: &str = "mechanism,train_pixel_fraction,train_sigma,train_data_fraction,\
test_pixel_fraction,test_sigma,test_data_fraction,seeds,failed,\
mean_epe_mean,mean_epe_std,auc_mean,auc_std,iou_mean,iou_std,f1_mean,f1_std";

/// Keys a sweep config file may hold besides the training keys.
pub const GRID_KEYS: [&str; 6] = [
    "mechanisms",
    "seeds",
    "test_pixel_fractions",
    "test_sigmas",
    "test_data_fractions",
    "eval_seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Shared training settings; `seed` and `mechanism` are replaced per cell.
    pub base: TrainConfig,
    pub mechanisms: Vec<Mechanism>,
    pub seeds: Vec<u64>,
    pub pixel_fractions: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub data_fractions: Vec<f64>,
    /// Seed of the test-time corruption, shared by all cells.
    pub eval_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            mechanisms: Mechanism::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            pixel_fractions: vec![0.0, 0.25, 0.5],
            sigmas: vec![0.0],
            data_fractions: vec![1.0],
            eval_seed: 0,
        }
    }
}

impl SweepConfig {
    /// Applies one `key=value`, delegating training keys to `settings`.
    pub fn set(&mut self, settings: &mut Settings, key: &str, value: &str) -> Result<()> {
        match key {
            "mechanisms" => self.mechanisms = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "test_pixel_fractions" => self.pixel_fractions = parse_list(key, value)?,
            "test_sigmas" => self.sigmas = parse_list(key, value)?,
            "test_data_fractions" => self.data_fractions = parse_list(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "seed" | "mechanism" => {
                return Err(Error::Usage(format!(
                    "{key:?} is set per cell in a sweep; use \"{key}s\""
                )))
            }
            _ => settings.set(key, value)?,
        }
        Ok(())
    }

    /// The test-noise grid in row order: pixel fraction, then sigma, then
    /// data fraction.
    pub fn grid(&self) -> Result<Vec<NoiseSpec>> {
        let mut out = Vec::new();
        for &p in &self.pixel_fractions {
            for &s in &self.sigmas {
                for &d in &self.data_fractions {
                    out.push(
                        NoiseSpec::new(p, s, d)
                            .map_err(|e| Error::Usage(format!("test noise grid: {e}")))?,
                    );
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("mechanisms", self.mechanisms.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("test_pixel_fractions", self.pixel_fractions.is_empty()),
            ("test_sigmas", self.sigmas.is_empty()),
            ("test_data_fractions", self.data_fractions.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Usage(format!("{name} must not be empty")));
        }
        self.base.validate().map_err(|e| Error::Usage(e.to_string()))?;
        self.grid().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub key: RunKey,
    pub outcome: std::result::Result<StratumMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sorted by mechanism, seed, then test noise.
    pub rows: Vec<SweepRow>,
    pub failed_cells: usize,
    pub cells: usize,
}

/// Thread count from `GPOE_THREADS`, or `None` for rayon's default.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("GPOE_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Usage(format!("GPOE_THREADS: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("GPOE_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_cell(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &SweepConfig,
    grid: &[NoiseSpec],
    mechanism: Mechanism,
    seed: u64,
) -> (Vec<SweepRow>, bool) {
    let cell = TrainConfig { mechanism, seed, ..config.base.clone() };
    let key = |test_noise| RunKey { mechanism, seed, train_noise: cell.train_noise, test_noise };
    let trained = match train(train_set, &cell) {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("training failed: {e}");
            let rows = grid
                .iter()
                .map(|&n| SweepRow { key: key(n), outcome: Err(msg.clone()) })
                .collect();
            return (rows, true);
        }
    };
    let mut failed = false;
    let rows = grid
        .iter()
        .map(|&n| {
            let outcome = evaluate(&trained.model, &trained.params, test_set, &n, config.eval_seed)
                .map(|r| r.all)
                .map_err(|e| {
                    failed = true;
                    format!("evaluation failed: {e}")
                });
            SweepRow { key: key(n), outcome }
        })
        .collect();
    (rows, failed)
}

fn noise_order(a: &NoiseSpec, b: &NoiseSpec) -> std::cmp::Ordering {
    triple(a)
        .iter()
        .zip(triple(b))
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Runs every cell, in parallel when `threads` allows. Failures are kept
/// as rows rather than aborting the sweep.
pub fn run_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &SweepConfig,
    threads: Option<usize>,
) -> Result<SweepResult> {
    config.validate()?;
    let grid = config.grid()?;
    let cells: Vec<(Mechanism, u64)> = config
        .mechanisms
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let outcomes: Vec<(Vec<SweepRow>, bool)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, s)| run_cell(train_set, test_set, config, &grid, m, s))
            .collect()
    });
    let failed_cells = outcomes.iter().filter(|(_, f)| *f).count();
    let mut rows: Vec<SweepRow> = outcomes.into_iter().flat_map(|(r, _)| r).collect();
    rows.sort_by(|a, b| {
        a.key
            .mechanism
            .cmp(&b.key.mechanism)
            .then(a.key.seed.cmp(&b.key.seed))
            .then_with(|| noise_order(&a.key.test_noise, &b.key.test_noise))
    });
    Ok(SweepResult { rows, failed_cells, cells: cells.len() })
}

pub fn long_csv(result: &SweepResult) -> String {
    let mut out = format!("{EVAL_HEADER},error\n");
    for row in &result.rows {
        let mut f = row.key.csv_fields();
        match &row.outcome {
            Ok(m) => {
                f.extend(metric_fields(m));
                f.push(String::new());
            }
            Err(e) => {
                f.extend(std::iter::repeat_n(String::new(), 4));
                // keep the message inside one CSV field
                f.push(format!("\"{}\"", e.replace('"', "'")));
            }
        }
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed statistics per (mechanism, test noise) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mechanism: Mechanism,
    pub train_noise: NoiseSpec,
    pub test_noise: NoiseSpec,
    pub seeds: usize,
    pub failed: usize,
    /// (mean, std) of mean EPE, AUC, IoU and F1, in that order.
    pub stats: [(f64, f64); 4],
}

pub fn summarize(result: &SweepResult) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut i = 0;
    let rows = &result.rows;
    // Rows are sorted by seed inside a mechanism, so regroup by noise.
    let mut order: Vec<&SweepRow> = rows.iter().collect();
    order.sort_by(|a, b| {
        a.key
            .mechanism
            .cmp(&b.key.mechanism)
            .then_with(|| noise_order(&a.key.test_noise, &b.key.test_noise))
            .then(a.key.seed.cmp(&b.key.seed))
    });
    while i < order.len() {
        let head = &order[i].key;
        let j = i + order[i..]
            .iter()
            .take_while(|r| r.key.mechanism == head.mechanism && r.key.test_noise == head.test_noise)
            .count();
        let ok: Vec<&StratumMetrics> = order[i..j].iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let column = |f: fn(&StratumMetrics) -> f64| -> Vec<f64> { ok.iter().map(|m| f(m)).collect() };
        let stats = [
            mean_std(&column(|m| m.mean_epe)),
            mean_std(&column(|m| m.auc)),
            mean_std(&column(|m| m.iou)),
            mean_std(&column(|m| m.f1)),
        ];
        out.push(SummaryRow {
            mechanism: head.mechanism,
            train_noise: head.train_noise,
            test_noise: head.test_noise,
            seeds: ok.len(),
            failed: j - i - ok.len(),
            stats,
        });
        i = j;
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let mut f = vec![r.mechanism.as_str().to_string()];
        f.extend(triple(&r.train_noise).iter().map(f64::to_string));
        f.extend(triple(&r.test_noise).iter().map(f64::to_string));
        f.push(r.seeds.to_string());
        f.push(r.failed.to_string());
        for (m, s) in r.stats {
            if r.seeds == 0 {
                f.extend([String::new(), String::new()]);
            } else {
                f.extend([m.to_string(), s.to_string()]);
            }
        }
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

/// Writes both CSVs into `dir`, then reports failed cells as [`Error::Partial`].
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    atomic_write(&dir.join(LONG_FILE), long_csv(result).as_bytes())?;
    atomic_write(&dir.join(SUMMARY_FILE), summary_csv(&summarize(result)).as_bytes())?;
    if result.failed_cells > 0 {
        return Err(Error::Partial { failed: result.failed_cells, total: result.cells });
    }
    Ok(())
}
