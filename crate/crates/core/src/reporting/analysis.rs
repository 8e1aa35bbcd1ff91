//! Per-layer weight-norm tables and class separability of final hidden states.

use std::fmt::Write;

use crate::encoder::{Encoder, LayerKind};
use crate::error::{bail, Result};
use crate::harness::Dataset;
use crate::tensor::Tape;

pub const NORMS_VERSION: &str = "# prunekit-norms v1";
pub const NORMS_HEADER: &str = "layer,block,kind,numel,remaining,mean_abs,frobenius,flagged";
pub const PROJECTION_VERSION: &str = "# prunekit-projection v1";

#[derive(Clone, Debug, PartialEq)]
pub struct NormRow {
    pub layer: String,
    pub block: usize,
    pub kind: LayerKind,
    pub kind_index: usize,
    pub numel: usize,
    pub remaining: usize,
    /// Mean |W̃| over unmasked entries; 0 for a fully masked layer.
    pub mean_abs: f64,
    pub frobenius: f64,
    /// Set when every entry of the layer is masked.
    pub flagged: bool,
}

pub fn analyze_norms(model: &Encoder) -> Vec<NormRow> {
    model
        .prunable_parameters()
        .iter()
        .map(|l| {
            let w = l.effective_weight();
            let remaining = l.mask.remaining();
            let abs_sum: f64 = w
                .data()
                .iter()
                .zip(l.mask.bits())
                .filter(|(_, &k)| k)
                .map(|(x, _)| x.abs())
                .sum();
            NormRow {
                layer: l.name(),
                block: l.block,
                kind: l.kind,
                kind_index: LayerKind::ALL
                    .iter()
                    .position(|&k| k == l.kind)
                    .unwrap_or(0),
                numel: l.numel(),
                remaining,
                mean_abs: if remaining > 0 {
                    abs_sum / remaining as f64
                } else {
                    0.0
                },
                frobenius: w.frobenius_norm(),
                flagged: remaining == 0,
            }
        })
        .collect()
}

pub fn norms_csv(rows: &[NormRow]) -> String {
    let mut s = format!("{NORMS_VERSION}\n{NORMS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.12e},{:.12e},{}",
            r.layer, r.block, r.kind, r.numel, r.remaining, r.mean_abs, r.frobenius, r.flagged
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Separability {
    /// Between-class over within-class variance of the 2-D projection.
    pub score: f64,
    /// Top two principal directions (unit norm, mutually orthogonal).
    pub directions: [Vec<f64>; 2],
    pub points: Vec<(f64, f64, usize)>,
}

impl Separability {
    pub fn points_csv(&self) -> String {
        let mut s = format!("{PROJECTION_VERSION}\nx,y,label\n");
        for (x, y, l) in &self.points {
            writeln!(s, "{x:.12e},{y:.12e},{l}").unwrap();
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of symmetric `cov` orthogonal to `against`, by power
/// iteration with explicit re-orthogonalization.
fn leading_direction(cov: &[f64], d: usize, against: Option<&[f64]>) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract())
        .collect();
    let project = |v: &mut Vec<f64>| {
        if let Some(a) = against {
            let c = dot(v, a);
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
        }
    };
    project(&mut v);
    normalize(&mut v);
    for _ in 0..5000 {
        let mut w: Vec<f64> = (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], &v)).collect();
        project(&mut w);
        if normalize(&mut w) == 0.0 {
            break;
        }
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        if delta < 1e-13 {
            break;
        }
    }
    project(&mut v);
    normalize(&mut v);
    v
}

/// PCA to two dimensions and the class-variance ratio there.
pub fn separability_of(features: &[Vec<f64>], labels: &[usize]) -> Result<Separability> {
    if features.len() != labels.len() || features.is_empty() {
        bail!(
            Dimension,
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        );
    }
    let d = features[0].len();
    if d < 2 {
        bail!(Dimension, "need at least two feature dimensions");
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c > 0 && c < 2) || counts.iter().filter(|&&c| c > 0).count() < 2 {
        bail!(Contract, "need at least two classes with two samples each");
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n;
            }
        }
    }
    let first = leading_direction(&cov, d, None);
    let second = leading_direction(&cov, d, Some(&first));
    let points: Vec<(f64, f64, usize)> = centered
        .iter()
        .zip(labels)
        .map(|(c, &l)| (dot(c, &first), dot(c, &second), l))
        .collect();
    let mut centroids = vec![(0.0, 0.0); classes];
    for &(x, y, l) in &points {
        centroids[l].0 += x / counts[l] as f64;
        centroids[l].1 += y / counts[l] as f64;
    }
    // the projection is centered, so the grand mean is the origin
    let between: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &k)| k as f64 * (c.0 * c.0 + c.1 * c.1))
        .sum::<f64>()
        / n;
    let within: f64 = points
        .iter()
        .map(|&(x, y, l)| (x - centroids[l].0).powi(2) + (y - centroids[l].1).powi(2))
        .sum::<f64>()
        / n;
    Ok(Separability {
        score: if within > 0.0 {
            between / within
        } else {
            f64::INFINITY
        },
        directions: [first, second],
        points,
    })
}

/// Separability of the classifier inputs on `data`.
pub fn separability(model: &Encoder, data: &Dataset) -> Result<Separability> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch(&idx);
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &x)?;
    let d = model.config().d_model;
    let features: Vec<Vec<f64>> = tape
        .value(pass.pooled)
        .chunks(d)
        .map(<[f64]>::to_vec)
        .collect();
    separability_of(&features, &labels)
}
