//! Hand-written SVG charts with fixed layout and number formatting.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::analysis::NormRow;
use crate::error::{bail, Result};
use crate::harness::{MetricsRow, RowStatus};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Point {
    remaining: f64,
    zero_shot: f64,
    train: f64,
}

/// Seed-averaged curve per `(criterion, regularizer)`, ordered by step.
fn series(rows: &[MetricsRow]) -> BTreeMap<(String, String), Vec<Point>> {
    // (remaining, zero-shot, train) sums and a count per step
    type Sums = BTreeMap<usize, (f64, f64, f64, usize)>;
    let mut acc: BTreeMap<(String, String), Sums> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == RowStatus::Ok) {
        let e = acc
            .entry((r.criterion.clone(), r.regularizer.clone()))
            .or_default()
            .entry(r.step)
            .or_insert((0.0, 0.0, 0.0, 0));
        e.0 += r.remaining_fraction;
        e.1 += r.mean_zero_shot;
        e.2 += r.train_accuracy;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|(k, steps)| {
            let pts = steps
                .into_values()
                .map(|(rem, zs, tr, n)| Point {
                    remaining: rem / n as f64,
                    zero_shot: zs / n as f64,
                    train: tr / n as f64,
                })
                .collect();
            (k, pts)
        })
        .collect()
}

/// Accuracy against remaining weights (100% on the left). Each series is a
/// `<g class="series">` holding the zero-shot line (solid) and the
/// train-language line (dashed).
pub fn plot_curves(rows: &[MetricsRow]) -> Result<String> {
    let curves = series(rows);
    if curves.is_empty() {
        bail!(Format, "no plottable rows");
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |rem: f64| LEFT + (1.0 - rem) * pw;
    let y = |acc: f64| TOP + (1.0 - acc) * ph;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .unwrap();
    s.push_str("<g class=\"axes\" stroke=\"black\">\n");
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#,
        TOP + ph
    )
    .unwrap();
    s.push_str("</g>\n<g class=\"ticks\">\n");
    for i in 0..=10 {
        let frac = 1.0 - i as f64 / 10.0;
        let px = x(frac);
        writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0,
            (frac * 100.0).round()
        )
        .unwrap();
    }
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let py = y(acc);
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            py + 4.0
        )
        .unwrap();
    }
    s.push_str("</g>\n");
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">remaining weights (%)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">accuracy</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    )
    .unwrap();
    for (i, ((crit, reg), pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = escape(&format!("{crit} / {reg}"));
        writeln!(
            s,
            r#"<g class="series" data-label="{label}" stroke="{color}" fill="none">"#
        )
        .unwrap();
        let line = |f: &dyn Fn(&Point) -> f64| {
            pts.iter()
                .map(|p| format!("{:.2},{:.2}", x(p.remaining), y(f(p))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(
            s,
            r#"<polyline points="{}" stroke-width="2"/>"#,
            line(&|p| p.zero_shot)
        )
        .unwrap();
        writeln!(
            s,
            r#"<polyline points="{}" stroke-width="1" stroke-dasharray="4 3"/>"#,
            line(&|p| p.train)
        )
        .unwrap();
        for p in pts {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                x(p.remaining),
                y(p.zero_shot)
            )
            .unwrap();
        }
        s.push_str("</g>\n");
        let ly = TOP + 14.0 * i as f64;
        let lx = LEFT + pw + 16.0;
        writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{label}</text></g>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" fill="gray">solid: zero-shot mean, dashed: train language</text>"#,
        LEFT + pw + 16.0,
        TOP + 14.0 * curves.len() as f64 + 10.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar profile of mean |W̃| per layer, grouped by block.
pub fn norms_svg(rows: &[NormRow]) -> String {
    let n = rows.len().max(1) as f64;
    let pw = WIDTH - LEFT - 30.0;
    let ph = HEIGHT - TOP - BOTTOM - 40.0;
    let max = rows
        .iter()
        .map(|r| r.mean_abs)
        .fold(0.0, f64::max)
        .max(1e-12);
    let bar = pw / n;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.2}">mean |w| over unmasked entries (max {max:.4})</text>"#,
        TOP - 10.0
    )
    .unwrap();
    for (i, r) in rows.iter().enumerate() {
        let h = r.mean_abs / max * ph;
        let x0 = LEFT + i as f64 * bar;
        let color = PALETTE[r.kind_index % PALETTE.len()];
        writeln!(
            s,
            r#"<rect class="bar" x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
            x0 + 1.0,
            TOP + ph - h,
            (bar - 2.0).max(0.5)
        )
        .unwrap();
        let cx = x0 + bar / 2.0;
        let ly = TOP + ph + 8.0;
        writeln!(
            s,
            r#"<text x="{cx:.2}" y="{ly:.2}" text-anchor="end" transform="rotate(-60 {cx:.2} {ly:.2})">{}</text>"#,
            escape(&r.layer)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
