//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::analysis::{analyze_norms, norms_csv, separability};
use super::csv::read_metrics;
use super::grid::{cell_stem, run_grid, write_cell_outputs, RunManifest};
use super::svg::{norms_svg, plot_curves};
use super::verify::run_all;
use crate::alignreg::RegularizerSpec;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::{build_data, fineprune, prepare, ExperimentConfig};
use crate::pruning::CriterionSpec;

pub const OUT_ENV: &str = "PRUNEKIT_OUT";
pub const DEFAULT_OUT: &str = "prunekit-out";

#[derive(Debug, Parser)]
#[command(
    name = "prunekit",
    version,
    about = "Fine-pruning and zero-shot transfer experiments"
)]
pub struct Cli {
    /// Experiment config (JSON); a run manifest for `grid`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [env: PRUNEKIT_OUT] [default: prunekit-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Pruning criterion, e.g. magnitude, global_magnitude, lamp, lookahead.
    #[arg(long, global = true)]
    pub criterion: Option<String>,
    /// Regularizer: none, l2, cosine, cosine_layerwise or frobenius.
    #[arg(long, global = true)]
    pub regularizer: Option<String>,
    /// Regularizer weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on every language and save the checkpoint.
    Pretrain,
    /// Pretrain, then run the prune schedule on the train language.
    Fineprune,
    /// Run every (config, seed) cell of a manifest.
    Grid,
    /// Per-layer weight norms of a checkpoint.
    AnalyzeNorms {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Class separability of final hidden states on one language.
    Separability {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        language: usize,
        /// Label for the output file.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Plot accuracy curves from metrics CSVs.
    Plot {
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long = "to")]
        output: PathBuf,
    },
    /// Gradient, spectral and mask self-checks.
    Verify,
}

/// Output directory: `--out`, then `PRUNEKIT_OUT`, then the default.
pub fn resolve_out(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

impl Cli {
    /// The experiment config with command-line overrides applied.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&read(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(c) = &self.criterion {
            cfg.criterion = c.parse::<CriterionSpec>()?;
        }
        if let Some(r) = &self.regularizer {
            cfg.regularizer.kind = r.parse::<RegularizerSpec>()?.kind;
        }
        if let Some(l) = self.lambda {
            cfg.regularizer.lambda = l;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self) -> Result<RunManifest> {
        let path = self.config.as_ref().ok_or_else(|| {
            Error::Config("grid needs --config pointing at a run manifest".into())
        })?;
        let mut m = RunManifest::from_json(&read(path)?)?;
        for run in &mut m.runs {
            if let Some(s) = self.seed {
                run.seeds = vec![s];
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Runs the command; returns the process exit code for an aborted run.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = cli.experiment()?;
            let out = resolve_out(cli.out.as_deref());
            fs::create_dir_all(&out)?;
            for &seed in &cfg.seeds {
                let pre = prepare(&cfg, seed)?;
                let path = out.join(format!("pretrain_seed{seed}.json"));
                pre.model.save(&path)?;
                let accs: Vec<String> = pre
                    .report
                    .val_accuracy
                    .iter()
                    .map(|a| format!("{a:.3}"))
                    .collect();
                println!(
                    "seed {seed}: {} epochs, val accuracy [{}] -> {}",
                    pre.report.epochs,
                    accs.join(", "),
                    path.display()
                );
            }
            Ok(0)
        }
        Command::Fineprune => {
            let cfg = cli.experiment()?;
            let out = resolve_out(cli.out.as_deref());
            let runs = out.join("runs");
            fs::create_dir_all(&runs)?;
            let mut code = 0;
            for &seed in &cfg.seeds {
                let pre = prepare(&cfg, seed)?;
                let result = fineprune(&pre, &cfg)?;
                write_cell_outputs(&cfg, seed, &result, &runs)?;
                let ckpt = out.join(format!("{}_final.json", cell_stem(&cfg.run_id, seed)));
                result.model.save(&ckpt)?;
                if let Some(last) = result.rows.last() {
                    println!(
                        "{}: step {} remaining {:.4} train {:.4} zero-shot {:.4} [{}]",
                        cell_stem(&cfg.run_id, seed),
                        last.step,
                        last.remaining_fraction,
                        last.train_accuracy,
                        last.mean_zero_shot,
                        last.status.as_str()
                    );
                }
                if result.aborted {
                    code = 2;
                }
            }
            Ok(code)
        }
        Command::Grid => {
            let m = cli.manifest()?;
            let out = cli
                .out
                .clone()
                .or_else(|| m.output_dir.clone())
                .unwrap_or_else(|| resolve_out(None));
            let outcome = run_grid(&m, &out)?;
            println!(
                "{} rows from {} runs -> {}",
                outcome.rows.len(),
                m.runs.len(),
                out.display()
            );
            for (run, seed, f) in &outcome.kd_fractions {
                println!(
                    "{}: kd direction holds at {:.1}% of records",
                    cell_stem(run, *seed),
                    100.0 * f
                );
            }
            for a in &outcome.aborted {
                eprintln!("aborted: {a}");
            }
            Ok(if outcome.aborted.is_empty() { 0 } else { 2 })
        }
        Command::AnalyzeNorms { checkpoint } => {
            let model = Encoder::load(checkpoint)?;
            let rows = analyze_norms(&model);
            let out = resolve_out(cli.out.as_deref());
            fs::create_dir_all(&out)?;
            fs::write(out.join("norms.csv"), norms_csv(&rows))?;
            fs::write(out.join("norms.svg"), norms_svg(&rows))?;
            for r in &rows {
                println!(
                    "{:<24} remaining {:>6}/{:<6} mean|w| {:.5}{}",
                    r.layer,
                    r.remaining,
                    r.numel,
                    r.mean_abs,
                    if r.flagged { "  FULLY PRUNED" } else { "" }
                );
            }
            Ok(0)
        }
        Command::Separability {
            checkpoint,
            language,
            step,
        } => {
            let model = Encoder::load(checkpoint)?;
            let mut cfg = cli.experiment()?;
            cfg.encoder = model.config().clone();
            let data = build_data(&cfg, model.seed())?;
            let test = data.test.get(*language).ok_or_else(|| {
                Error::Config(format!(
                    "language {language} out of range 0..{}",
                    data.test.len()
                ))
            })?;
            let sep = separability(&model, test)?;
            let out = resolve_out(cli.out.as_deref());
            fs::create_dir_all(&out)?;
            let path = out.join(format!("projection_lang{language}_step{step}.csv"));
            fs::write(&path, sep.points_csv())?;
            println!("separability {:.6} -> {}", sep.score, path.display());
            Ok(0)
        }
        Command::Plot { input, output } => {
            let mut rows = Vec::new();
            for p in input {
                rows.extend(read_metrics(&read(p)?)?);
            }
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(output, plot_curves(&rows)?)?;
            println!("{} rows -> {}", rows.len(), output.display());
            Ok(0)
        }
        Command::Verify => {
            let results = run_all(cli.seed.unwrap_or(0))?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.ok()).count();
            println!(
                "{} of {} checks passed",
                results.len() - failed,
                results.len()
            );
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

/// Parses `args`, runs, and maps the outcome to an exit code: 0 on success,
/// 2 for numerical failures, setup failures and aborted runs, 1 otherwise.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
