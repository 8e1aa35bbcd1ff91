//! Grid execution: every (config, seed) cell runs in an isolated worker that
//! writes only its own files; one single-threaded merge writes the summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::csv::{
    kd_direction_fraction, read_metrics, write_diagnostics, write_events, write_metrics,
};
use super::svg::plot_curves;
use crate::error::{bail, Error, Result};
use crate::harness::{
    fineprune, prepare, ExperimentConfig, FinepruneOutput, MetricsRow, Pretrained, RowStatus,
};

pub const OPERATING_POINT_VERSION: &str = "# prunekit-operating-point v1";
pub const OPERATING_POINT_HEADER: &str =
    "run_id,criterion,regularizer,seeds,remaining_fraction,train_accuracy,mean_zero_shot,zero_shot_se,transfer_gap";

fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub runs: Vec<ExperimentConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            bail!(Config, "manifest has no runs");
        }
        if self.parallelism == 0 {
            bail!(Config, "parallelism must be at least 1");
        }
        let mut seen = HashSet::new();
        for r in &self.runs {
            r.validate()?;
            if !seen.insert(r.run_id.as_str()) {
                bail!(Config, "duplicate run id {:?}", r.run_id);
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// File stem of one cell's outputs.
pub fn cell_stem(run_id: &str, seed: u64) -> String {
    format!("{run_id}_seed{seed}")
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    /// All rows in manifest order, then seed order.
    pub rows: Vec<MetricsRow>,
    pub written: Vec<PathBuf>,
    /// `(run_id, seed, fraction)` for every cell that recorded diagnostics.
    pub kd_fractions: Vec<(String, u64, f64)>,
    pub aborted: Vec<String>,
}

struct CellResult {
    metrics: PathBuf,
    written: Vec<PathBuf>,
    kd: Option<f64>,
    aborted: bool,
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Writes one cell's metrics, events, timing log and (if enabled)
/// diagnostics into `dir`. The metrics path comes first.
pub fn write_cell_outputs(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &FinepruneOutput,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let stem = cell_stem(&cfg.run_id, seed);
    let mut written = vec![
        write(&dir.join(format!("{stem}.csv")), &write_metrics(&out.rows))?,
        write(
            &dir.join(format!("{stem}_events.csv")),
            &write_events(&out.events),
        )?,
    ];
    let mut timing = String::from("step wall_ms\n");
    for r in &out.rows {
        writeln!(timing, "{} {}", r.step, r.wall_ms).unwrap();
    }
    written.push(write(&dir.join(format!("{stem}.timing.log")), &timing)?);
    if cfg.diagnostics {
        written.push(write(
            &dir.join(format!("{stem}_diagnostics.csv")),
            &write_diagnostics(&out.diagnostics),
        )?);
    }
    Ok(written)
}

fn run_cell(cfg: &ExperimentConfig, pre: &Pretrained, dir: &Path) -> Result<CellResult> {
    let out = fineprune(pre, cfg)?;
    let written = write_cell_outputs(cfg, pre.seed, &out, dir)?;
    Ok(CellResult {
        metrics: written[0].clone(),
        written,
        kd: kd_direction_fraction(&out.diagnostics),
        aborted: out.aborted,
    })
}

/// Runs every cell of `manifest` into `out`: `runs/` holds per-cell files,
/// and `summary.csv`, `operating_point.csv`, `curves.svg` and
/// `kd_report.txt` are merged at the end.
pub fn run_grid(manifest: &RunManifest, out: &Path) -> Result<GridOutcome> {
    manifest.validate()?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism)
        .build()
        .map_err(|e| Error::Setup(format!("thread pool: {e}")))?;

    let mut keys: Vec<(String, usize, u64)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, cfg) in manifest.runs.iter().enumerate() {
        for &seed in &cfg.seeds {
            let key = cfg.pretrain_key(seed);
            if seen.insert(key.clone()) {
                keys.push((key, i, seed));
            }
        }
    }
    let pretrained: BTreeMap<String, Arc<Pretrained>> = pool.install(|| {
        keys.par_iter()
            .map(|(key, i, seed)| Ok((key.clone(), Arc::new(prepare(&manifest.runs[*i], *seed)?))))
            .collect::<Result<BTreeMap<_, _>>>()
    })?;

    let cells: Vec<(&ExperimentConfig, u64)> = manifest
        .runs
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(cfg, seed)| run_cell(cfg, &pretrained[&cfg.pretrain_key(*seed)], &runs_dir))
            .collect::<Result<Vec<_>>>()
    })?;

    // merge
    let mut rows = Vec::new();
    let mut written = Vec::new();
    let mut kd_fractions = Vec::new();
    let mut aborted = Vec::new();
    for ((cfg, seed), res) in cells.iter().zip(results) {
        rows.extend(read_metrics(&fs::read_to_string(&res.metrics)?)?);
        written.extend(res.written);
        if let Some(f) = res.kd {
            kd_fractions.push((cfg.run_id.clone(), *seed, f));
        }
        if res.aborted {
            aborted.push(cell_stem(&cfg.run_id, *seed));
        }
    }
    written.push(write(&out.join("summary.csv"), &write_metrics(&rows))?);
    written.push(write(
        &out.join("operating_point.csv"),
        &operating_point_csv(&rows),
    )?);
    written.push(write(&out.join("curves.svg"), &plot_curves(&rows)?)?);
    let mut kd = String::new();
    for (run, seed, f) in &kd_fractions {
        writeln!(
            kd,
            "{}: weight distortion <= activation distortion at {:.1}% of (prune step, layer) records",
            cell_stem(run, *seed),
            100.0 * f
        )
        .unwrap();
    }
    written.push(write(&out.join("kd_report.txt"), &kd)?);
    Ok(GridOutcome {
        rows,
        written,
        kd_fractions,
        aborted,
    })
}

/// Seed statistics of one run at its last completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub run_id: String,
    pub criterion: String,
    pub regularizer: String,
    pub seeds: usize,
    pub remaining_fraction: f64,
    pub train_accuracy: f64,
    pub mean_zero_shot: f64,
    pub zero_shot_se: f64,
    pub transfer_gap: f64,
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn operating_points(rows: &[MetricsRow]) -> Vec<OperatingPoint> {
    let mut order: Vec<String> = Vec::new();
    let mut by_run: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == RowStatus::Ok) {
        if !by_run.contains_key(r.run_id.as_str()) {
            order.push(r.run_id.clone());
        }
        by_run.entry(&r.run_id).or_default().push(r);
    }
    order
        .iter()
        .map(|id| {
            let run = &by_run[id.as_str()];
            let last = run.iter().map(|r| r.step).max().unwrap_or(0);
            let at: Vec<&&MetricsRow> = run.iter().filter(|r| r.step == last).collect();
            let col =
                |f: &dyn Fn(&MetricsRow) -> f64| at.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (zs, se) = mean_se(&col(&|r| r.mean_zero_shot));
            OperatingPoint {
                run_id: id.clone(),
                criterion: at[0].criterion.clone(),
                regularizer: at[0].regularizer.clone(),
                seeds: at.len(),
                remaining_fraction: mean_se(&col(&|r| r.remaining_fraction)).0,
                train_accuracy: mean_se(&col(&|r| r.train_accuracy)).0,
                mean_zero_shot: zs,
                zero_shot_se: se,
                transfer_gap: mean_se(&col(&|r| r.transfer_gap())).0,
            }
        })
        .collect()
}

pub fn operating_point_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{OPERATING_POINT_VERSION}\n{OPERATING_POINT_HEADER}\n");
    for p in operating_points(rows) {
        writeln!(
            s,
            "{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            p.run_id,
            p.criterion,
            p.regularizer,
            p.seeds,
            p.remaining_fraction,
            p.train_accuracy,
            p.mean_zero_shot,
            p.zero_shot_se,
            p.transfer_gap
        )
        .unwrap();
    }
    s
}
