//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout; exits nonzero on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracles::{bottom_k_by_scan, lamp_by_definition, lookahead_by_paths};
use common::rng;
use prunekit::alignreg::{singular_values, RegularizerKind, RegularizerSpec};
use prunekit::encoder::{LayerKind, PrunableLayer};
use prunekit::harness::MetricsRow;
use prunekit::pruning::{
    score_gradient_magnitude, score_lamp, score_lookahead, score_magnitude, select, CriterionKind,
    CriterionSpec, PruneSchedule, ScheduleState, Scope,
};
use prunekit::reporting::{
    check_cosine_gradient, check_frobenius_gradient, check_masked_stay_zero, check_schedule,
    mean_se, run_grid, RunManifest,
};
use prunekit::tensor::{gelu_scalar, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MANIFEST: &str = include_str!("../configs/acceptance_grid.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let r = check_cosine_gradient(100, 1e-6, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.ok() && secs < 5.0,
        format!("{}/{} cases within 1e-6 of finite differences and the tape (worst {:.2e}), {secs:.2} s", r.passed, r.total, r.worst),
    )
}

fn frobenius_gradient() -> Outcome {
    let r = check_frobenius_gradient(100, 1e-7, 2).unwrap();
    outcome(
        r.ok(),
        format!(
            "{}/{} masked cases within 1e-7 (worst {:.2e})",
            r.passed, r.total, r.worst
        ),
    )
}

fn mirsky() -> Outcome {
    let mut r = rng(3);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..500 {
        let (m, n) = (r.random_range(1..=16), r.random_range(1..=16));
        let scale = 10f64.powf(r.random_range(-4.0..1.0));
        let a = Tensor::from_fn(m, n, |_, _| r.random_range(-2.0..2.0));
        let e = Tensor::from_fn(m, n, |_, _| scale * r.random_range(-1.0..1.0));
        let b = a.add(&e).unwrap();
        let (sa, sb) = (singular_values(&a).unwrap(), singular_values(&b).unwrap());
        let lhs = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let slack = lhs - e.frobenius_norm();
        worst = worst.max(slack);
        violations += usize::from(slack > 1e-9);
    }
    outcome(
        violations == 0,
        format!("{violations} violations over 500 pairs (max slack {worst:.2e})"),
    )
}

fn mask_semantics() -> Outcome {
    let (r, fraction) = check_schedule(4).unwrap();
    let ok = r.ok() && (fraction - 0.314).abs() <= 0.005;
    outcome(
        ok,
        format!(
            "{}/{} per-layer counts within ±1 of N·0.9^k (worst {:.3}); step 11 at {:.2}%",
            r.passed,
            r.total,
            r.worst,
            100.0 * fraction
        ),
    )
}

fn zero_and_stay_zero() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in [
        RegularizerKind::None,
        RegularizerKind::L2,
        RegularizerKind::CosineUnitwise,
        RegularizerKind::CosineLayerwise,
        RegularizerKind::Frobenius,
    ] {
        let r = check_masked_stay_zero(RegularizerSpec { kind, lambda: 0.05 }, 200, 5).unwrap();
        ok &= r.ok();
        parts.push(format!("{}/{}", r.passed, r.total));
    }
    outcome(
        ok,
        format!("bit-clean steps per regularizer: {}", parts.join(", ")),
    )
}

fn random_layer(r: &mut ChaCha8Rng, quantized: bool) -> PrunableLayer {
    let (rows, cols) = (r.random_range(1..=8), r.random_range(1..=8));
    random_layer_sized(r, rows, cols, quantized)
}

fn random_layer_sized(
    r: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    quantized: bool,
) -> PrunableLayer {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = r.random_range(-1.0..1.0);
            if quantized {
                (x * 4.0).round() / 4.0
            } else {
                x
            }
        })
        .collect();
    let mut layer = PrunableLayer::new(
        LayerKind::Intermediate,
        0,
        Tensor::matrix(rows, cols, data).unwrap(),
        Tensor::zeros(&[cols]),
    )
    .unwrap();
    for f in 0..rows * cols {
        if r.random_bool(0.2) && layer.mask.remaining() > 1 {
            layer.mask.prune(f).unwrap();
        }
    }
    layer.apply_mask();
    layer
}

/// Selection of one prune step on a single layer whose next target is
/// `round(N · 0.9^6)`.
fn picks(layer: &PrunableLayer, scores: &[f64]) -> (Vec<usize>, usize) {
    let mut state =
        ScheduleState::from_sizes(vec![layer.numel()], PruneSchedule::default()).unwrap();
    state.completed = 5;
    let remaining = layer.mask.remaining();
    let k = remaining.saturating_sub(state.layer_target(0, 6));
    let crit = CriterionSpec::new(CriterionKind::Magnitude, Scope::LayerWise);
    (
        select(&[scores.to_vec()], crit, &state, &[remaining])
            .unwrap()
            .remove(0),
        k,
    )
}

fn criterion_oracles() -> Outcome {
    let mut r = rng(6);
    let mut agree = BTreeMap::from([
        ("magnitude", 0),
        ("gradient_magnitude", 0),
        ("lamp", 0),
        ("lookahead", 0),
    ]);
    for case in 0..50 {
        let layer = random_layer(&mut r, case % 2 == 0);
        let live = layer.mask.bits().to_vec();
        let abs: Vec<f64> = layer.weight.data().iter().map(|w| w.abs()).collect();
        let (p, k) = picks(&layer, &score_magnitude(&layer));
        *agree.get_mut("magnitude").unwrap() += usize::from(p == bottom_k_by_scan(&abs, &live, k));

        let grads: Vec<f64> = (0..layer.numel())
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        let batches = r.random_range(1..=4);
        let (p, k) = picks(
            &layer,
            &score_gradient_magnitude(&layer, &grads, batches).unwrap(),
        );
        let mean: Vec<f64> = grads.iter().map(|g| g / batches as f64).collect();
        *agree.get_mut("gradient_magnitude").unwrap() +=
            usize::from(p == bottom_k_by_scan(&mean, &live, k));

        let (p, k) = picks(&layer, &score_lamp(&layer));
        let oracle = lamp_by_definition(layer.weight.data(), &live);
        *agree.get_mut("lamp").unwrap() += usize::from(p == bottom_k_by_scan(&oracle, &live, k));

        let (a, b, c, d) = (
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let prev = random_layer_sized(&mut r, a, b, false);
        let mid = random_layer_sized(&mut r, b, c, false);
        let next = random_layer_sized(&mut r, c, d, false);
        let (pe, ne) = (prev.effective_weight(), next.effective_weight());
        let (use_prev, use_next) =
            [(true, true), (false, true), (true, false), (false, false)][case % 4];
        let ours =
            score_lookahead(use_prev.then_some(&prev), &mid, use_next.then_some(&next)).unwrap();
        let oracle = lookahead_by_paths(
            use_prev.then_some((pe.data(), a, b)),
            mid.weight.data(),
            b,
            c,
            use_next.then_some((ne.data(), c, d)),
            mid.mask.bits(),
        );
        let (p, k) = picks(&mid, &ours);
        *agree.get_mut("lookahead").unwrap() +=
            usize::from(p == bottom_k_by_scan(&oracle, mid.mask.bits(), k));
    }
    let ok = agree.values().all(|&n| n == 50);
    let detail = agree
        .iter()
        .map(|(k, v)| format!("{k} {v}/50"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn gelu_oracle() -> Outcome {
    let xs: Vec<f64> = (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0).collect();
    let reference =
        |z: f64| 0.5 * z * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    let mut tape = Tape::new();
    let v = tape.constant(vec![xs.len()], xs.clone()).unwrap();
    let g = tape.gelu(v);
    let worst = xs
        .iter()
        .zip(tape.value(g))
        .map(|(&z, &t)| {
            (gelu_scalar(z) - reference(z))
                .abs()
                .max((t - reference(z)).abs())
        })
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-10,
        format!("max abs error {worst:.2e} over 1000 points in [-10, 10]"),
    )
}

struct GridRun {
    rows: Vec<MetricsRow>,
    kd: Vec<(String, u64, f64)>,
    dir: tempfile::TempDir,
    secs: f64,
}

fn grid_once(manifest: &RunManifest) -> GridRun {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let outcome = run_grid(manifest, dir.path()).unwrap();
    GridRun {
        rows: outcome.rows,
        kd: outcome.kd_fractions,
        dir,
        secs: t.elapsed().as_secs_f64(),
    }
}

/// Zero-shot accuracy per seed at the last step of one run.
fn final_by_seed(
    rows: &[MetricsRow],
    run: &str,
    f: impl Fn(&MetricsRow) -> f64,
) -> BTreeMap<u64, f64> {
    let last = rows
        .iter()
        .filter(|r| r.run_id == run)
        .map(|r| r.step)
        .max()
        .unwrap_or(0);
    rows.iter()
        .filter(|r| r.run_id == run && r.step == last)
        .map(|r| (r.seed, f(r)))
        .collect()
}

/// Mean paired difference `a − b` across seeds and its standard error.
fn paired(rows: &[MetricsRow], a: &str, b: &str) -> (f64, f64) {
    let (xa, xb) = (
        final_by_seed(rows, a, |r| r.mean_zero_shot),
        final_by_seed(rows, b, |r| r.mean_zero_shot),
    );
    let d: Vec<f64> = xa
        .iter()
        .filter_map(|(s, x)| xb.get(s).map(|y| x - y))
        .collect();
    mean_se(&d)
}

fn ordering(grid: &GridRun, manifest: &RunManifest) -> Outcome {
    let mut comparisons = vec![
        ("magnitude-cosine", "magnitude-l2"),
        ("magnitude-frobenius", "magnitude-l2"),
    ];
    for m in [
        "magnitude-l2",
        "global_magnitude-l2",
        "gradient_magnitude-l2",
        "lamp-l2",
        "lookahead-l2",
    ] {
        comparisons.push((m, "random-l2"));
        comparisons.push((m, "global_random-l2"));
    }
    let mut ok = manifest
        .runs
        .iter()
        .all(|r| r.seeds.len() >= 5 && r.n_languages == 5 && r.encoder.n_classes == 4);
    let mut lines = Vec::new();
    for (a, b) in comparisons {
        let (d, se) = paired(&grid.rows, a, b);
        let good = d > se;
        ok &= good;
        lines.push(format!(
            "{a} - {b} = {d:+.4} (se {se:.4}){}",
            if good { "" } else { " FAIL" }
        ));
    }
    ok &= grid.secs < 600.0;
    outcome(ok, format!("grid {:.0} s; {}", grid.secs, lines.join("; ")))
}

fn discrepancy(grid: &GridRun, manifest: &RunManifest) -> Outcome {
    let mut ok = true;
    let mut worst_gap = f64::INFINITY;
    let mut widen = Vec::new();
    for run in &manifest.runs {
        let rows: Vec<&MetricsRow> = grid
            .rows
            .iter()
            .filter(|r| r.run_id == run.run_id)
            .collect();
        let last = rows.iter().map(|r| r.step).max().unwrap();
        for r in rows.iter().filter(|r| r.step == last) {
            worst_gap = worst_gap.min(r.transfer_gap());
            ok &= r.train_accuracy >= r.mean_zero_shot;
        }
        // step 1 is the first prune, at 90% remaining
        let gap_at = |k: usize| {
            let g: Vec<f64> = rows
                .iter()
                .filter(|r| r.step == k)
                .map(|r| r.transfer_gap())
                .collect();
            mean_se(&g).0
        };
        let (g90, g31) = (gap_at(1), gap_at(last));
        ok &= g31 > g90;
        widen.push(format!("{} {:.3}->{:.3}", run.run_id, g90, g31));
    }
    outcome(
        ok,
        format!(
            "smallest final gap {worst_gap:+.4}; seed-mean gap 90%->31%: {}",
            widen.join(", ")
        ),
    )
}

fn outputs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "svg")) {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(a: &GridRun, b: &GridRun) -> Outcome {
    let (fa, fb) = (outputs(a.dir.path()), outputs(b.dir.path()));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && !fa.is_empty(),
        format!(
            "{} CSV/SVG files compared, {} differ",
            fa.len(),
            differing.len()
        ),
    )
}

fn kd_gap(grid: &GridRun, manifest: &RunManifest) -> Outcome {
    let reference = manifest
        .runs
        .iter()
        .find(|r| r.diagnostics)
        .expect("a run with diagnostics");
    let mut ok = !grid.kd.is_empty();
    for &seed in &reference.seeds {
        let path = grid
            .dir
            .path()
            .join("runs")
            .join(format!("{}_seed{seed}_diagnostics.csv", reference.run_id));
        let text = fs::read_to_string(&path).unwrap_or_default();
        let steps: std::collections::BTreeSet<usize> = text
            .lines()
            .skip(2)
            .filter(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f.len() == 8
                    && f[6].parse::<f64>().is_ok_and(f64::is_finite)
                    && f[7].parse::<f64>().is_ok_and(f64::is_finite)
            })
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        ok &= steps == (1..=reference.schedule.n_steps).collect();
    }
    let report = fs::read_to_string(grid.dir.path().join("kd_report.txt")).unwrap_or_default();
    ok &= report.lines().count() == grid.kd.len();
    let fractions: Vec<String> = grid
        .kd
        .iter()
        .map(|(_, s, f)| format!("seed {s} {:.1}%", 100.0 * f))
        .collect();
    outcome(
        ok,
        format!(
            "both sides logged at every step; direction holds at {}",
            fractions.join(", ")
        ),
    )
}

fn main() {
    let manifest = RunManifest::from_json(MANIFEST).unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "cosine gradient fidelity", gradient_fidelity()),
        (2, "frobenius gradient", frobenius_gradient()),
        (3, "mirsky property", mirsky()),
        (4, "mask semantics", mask_semantics()),
        (5, "zero-and-stay-zero", zero_and_stay_zero()),
        (6, "criterion oracles", criterion_oracles()),
    ];
    let first = grid_once(&manifest);
    let second = grid_once(&manifest);
    results.push((7, "zero-shot ordering", ordering(&first, &manifest)));
    results.push((
        8,
        "train/zero-shot discrepancy",
        discrepancy(&first, &manifest),
    ));
    results.push((9, "gelu oracle", gelu_oracle()));
    results.push((10, "grid determinism", determinism(&first, &second)));
    results.push((11, "kd-gap measurement", kd_gap(&first, &manifest)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
