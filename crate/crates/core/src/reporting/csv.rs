//! Versioned CSV files: metrics, prune events and per-step diagnostics.

use crate::alignreg::LayerDiagnostics;
use crate::error::{bail, Error, Result};
use crate::harness::{MetricsRow, RowStatus, StepDiagnostics};
use crate::pruning::PruneEvent;

pub const METRICS_VERSION: &str = "# prunekit-metrics v1";
pub const METRICS_HEADER: &str = "run_id,seed,criterion,regularizer,step,remaining_fraction,train_accuracy,mean_zero_shot,language_accuracy,ce_loss,regularizer_value,status";
pub const EVENTS_VERSION: &str = "# prunekit-events v1";
pub const DIAGNOSTICS_VERSION: &str = "# prunekit-diagnostics v1";

fn metrics_line(r: &MetricsRow) -> String {
    let langs: Vec<String> = r
        .language_accuracy
        .iter()
        .map(|a| format!("{a:.9}"))
        .collect();
    format!(
        "{},{},{},{},{},{:.9},{:.9},{:.9},{},{},{},{}",
        r.run_id,
        r.seed,
        r.criterion,
        r.regularizer,
        r.step,
        r.remaining_fraction,
        r.train_accuracy,
        r.mean_zero_shot,
        langs.join(";"),
        r.ce_loss,
        r.regularizer_value,
        r.status.as_str()
    )
}

pub fn write_metrics(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_VERSION}\n{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&metrics_line(r));
        s.push('\n');
    }
    s
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {name} {raw:?}")))
}

/// Parses a metrics CSV; the version line and header must match exactly.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_VERSION) => {}
        Some(other) if other.starts_with("# prunekit-metrics") => {
            bail!(Format, "unsupported metrics version {other:?}")
        }
        _ => bail!(Format, "missing metrics version line"),
    }
    if lines.next() != Some(METRICS_HEADER) {
        bail!(Format, "metrics header mismatch");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 3;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            bail!(Format, "line {n}: expected 12 fields, found {}", f.len());
        }
        let language_accuracy = if f[8].is_empty() {
            vec![]
        } else {
            f[8].split(';')
                .map(|a| field(a, "accuracy", n))
                .collect::<Result<_>>()?
        };
        let status = match f[11] {
            "ok" => RowStatus::Ok,
            "aborted" => RowStatus::Aborted,
            other => bail!(Format, "line {n}: unknown status {other:?}"),
        };
        rows.push(MetricsRow {
            run_id: f[0].to_string(),
            seed: field(f[1], "seed", n)?,
            criterion: f[2].to_string(),
            regularizer: f[3].to_string(),
            step: field(f[4], "step", n)?,
            remaining_fraction: field(f[5], "remaining_fraction", n)?,
            train_accuracy: field(f[6], "train_accuracy", n)?,
            mean_zero_shot: field(f[7], "mean_zero_shot", n)?,
            language_accuracy,
            ce_loss: field(f[9], "ce_loss", n)?,
            regularizer_value: field(f[10], "regularizer_value", n)?,
            wall_ms: 0,
            status,
        });
    }
    Ok(rows)
}

pub fn write_events(events: &[PruneEvent]) -> String {
    let mut s = format!("{EVENTS_VERSION}\n{}\n", PruneEvent::CSV_HEADER);
    for e in events {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_diagnostics(steps: &[StepDiagnostics]) -> String {
    let mut s = format!("{DIAGNOSTICS_VERSION}\n{}\n", LayerDiagnostics::CSV_HEADER);
    for d in steps {
        for l in &d.layers {
            s.push_str(&l.csv_row(d.step));
            s.push('\n');
        }
    }
    s
}

/// Fraction of (step, layer) records where the weight distortion is at most
/// the activation distortion.
pub fn kd_direction_fraction(steps: &[StepDiagnostics]) -> Option<f64> {
    let all: Vec<&LayerDiagnostics> = steps.iter().flat_map(|s| &s.layers).collect();
    if all.is_empty() {
        return None;
    }
    Some(all.iter().filter(|l| l.kd_direction_holds()).count() as f64 / all.len() as f64)
}
