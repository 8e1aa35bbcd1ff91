//! Per-layer importance scores. Already-pruned entries carry [`PRUNED`] so
//! they are never selected again.

use rand::Rng;

use crate::encoder::PrunableLayer;
use crate::error::{bail, Result};

/// Sentinel score for masked entries.
pub const PRUNED: f64 = f64::NEG_INFINITY;

fn masked_map(layer: &PrunableLayer, mut f: impl FnMut(usize) -> f64) -> Vec<f64> {
    (0..layer.numel())
        .map(|i| if layer.mask.is_kept(i) { f(i) } else { PRUNED })
        .collect()
}

/// `|W|` at unmasked positions.
pub fn score_magnitude(layer: &PrunableLayer) -> Vec<f64> {
    let w = layer.weight.data();
    masked_map(layer, |i| w[i].abs())
}

pub fn score_random(layer: &PrunableLayer, rng: &mut impl Rng) -> Vec<f64> {
    masked_map(layer, |_| rng.random::<f64>())
}

/// Accumulated `Σ_batches |∂ℓ/∂W|` at unmasked positions.
pub fn score_gradient_magnitude(
    layer: &PrunableLayer,
    accumulated_abs_grad: &[f64],
    batches: usize,
) -> Result<Vec<f64>> {
    if batches == 0 {
        bail!(
            Contract,
            "gradient accumulator for {} is empty",
            layer.name()
        );
    }
    if accumulated_abs_grad.len() != layer.numel() {
        bail!(
            Dimension,
            "accumulator of {} for {} weights",
            accumulated_abs_grad.len(),
            layer.numel()
        );
    }
    Ok(masked_map(layer, |i| accumulated_abs_grad[i]))
}

/// LAMP: with unmasked magnitudes sorted ascending `u_1 ≤ … ≤ u_K`,
/// `score(u_i) = u_i² / Σ_{j≥i} u_j²`. Ties are ordered by flat index.
pub fn score_lamp(layer: &PrunableLayer) -> Vec<f64> {
    let w = layer.weight.data();
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| layer.mask.is_kept(i)).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let mut scores = vec![PRUNED; w.len()];
    let mut tail = 0.0;
    for &i in order.iter().rev() {
        let sq = w[i] * w[i];
        tail += sq;
        scores[i] = if tail > 0.0 { sq / tail } else { 0.0 };
    }
    scores
}

/// Lookahead: `|W[i,j]| · ‖prev[:, i]‖₂ · ‖next[j, :]‖₂` over effective
/// weights; a missing neighbour contributes a factor of 1.
pub fn score_lookahead(
    prev: Option<&PrunableLayer>,
    layer: &PrunableLayer,
    next: Option<&PrunableLayer>,
) -> Result<Vec<f64>> {
    let (rows, cols) = (layer.fan_in(), layer.fan_out());
    let in_norms = match prev {
        Some(p) => {
            if p.fan_out() != rows {
                bail!(Dimension, "{} does not feed {}", p.name(), layer.name());
            }
            let pw = p.effective_weight();
            (0..rows)
                .map(|i| pw.column(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        }
        None => vec![1.0; rows],
    };
    let out_norms = match next {
        Some(n) => {
            if n.fan_in() != cols {
                bail!(Dimension, "{} does not feed {}", layer.name(), n.name());
            }
            let nw = n.effective_weight();
            (0..cols)
                .map(|j| nw.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        }
        None => vec![1.0; cols],
    };
    let w = layer.weight.data();
    Ok(masked_map(layer, |f| {
        let (i, j) = (f / cols, f % cols);
        w[f].abs() * in_norms[i] * out_norms[j]
    }))
}

/// Indices of the `k` smallest selectable scores, ties broken by ascending index.
pub fn bottom_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut live: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] != PRUNED).collect();
    if k > live.len() {
        bail!(
            Contract,
            "asked to remove {k} weights but only {} remain",
            live.len()
        );
    }
    live.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    live.truncate(k);
    Ok(live)
}
