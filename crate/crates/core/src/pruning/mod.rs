//! Iterative pruning: criteria, layer-wise and global mask selection, and the
//! geometric schedule where each step removes a fixed fraction of the
//! weights that are still unmasked.

mod criteria;

pub use criteria::{
    bottom_k, score_gradient_magnitude, score_lamp, score_lookahead, score_magnitude, score_random,
    PRUNED,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Random,
    Magnitude,
    GradientMagnitude,
    Lamp,
    Lookahead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    LayerWise,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    pub scope: Scope,
}

impl Default for CriterionSpec {
    fn default() -> Self {
        Self {
            kind: CriterionKind::Magnitude,
            scope: Scope::LayerWise,
        }
    }
}

impl CriterionSpec {
    pub const fn new(kind: CriterionKind, scope: Scope) -> Self {
        Self { kind, scope }
    }

    /// LAMP and lookahead scores are computed per layer, so both only accept
    /// `layer_wise`. LAMP still selects with one cut over the pooled scores.
    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.scope) {
            (CriterionKind::Lamp | CriterionKind::Lookahead, Scope::Global) => {
                bail!(Config, "{:?} only accepts layer_wise scope", self.kind)
            }
            _ => Ok(()),
        }
    }

    /// Whether selection pools scores across layers.
    pub fn pools_globally(&self) -> bool {
        self.scope == Scope::Global || self.kind == CriterionKind::Lamp
    }

    pub fn name(&self) -> &'static str {
        match (self.kind, self.scope) {
            (CriterionKind::Random, Scope::LayerWise) => "random",
            (CriterionKind::Random, Scope::Global) => "global_random",
            (CriterionKind::Magnitude, Scope::LayerWise) => "magnitude",
            (CriterionKind::Magnitude, Scope::Global) => "global_magnitude",
            (CriterionKind::GradientMagnitude, Scope::LayerWise) => "gradient_magnitude",
            (CriterionKind::GradientMagnitude, Scope::Global) => "global_gradient_magnitude",
            (CriterionKind::Lamp, _) => "lamp",
            (CriterionKind::Lookahead, _) => "lookahead",
        }
    }

    /// Every accepted criterion.
    pub fn all() -> Vec<CriterionSpec> {
        use CriterionKind::*;
        use Scope::*;
        vec![
            Self::new(Random, LayerWise),
            Self::new(Random, Global),
            Self::new(Magnitude, LayerWise),
            Self::new(Magnitude, Global),
            Self::new(GradientMagnitude, LayerWise),
            Self::new(GradientMagnitude, Global),
            Self::new(Lamp, LayerWise),
            Self::new(Lookahead, LayerWise),
        ]
    }
}

impl fmt::Display for CriterionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    pub interval_epochs: usize,
    /// Fraction of the currently remaining prunable weights removed per step.
    pub step_fraction: f64,
    pub n_steps: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            interval_epochs: 3,
            step_fraction: 0.10,
            n_steps: 11,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            bail!(
                Config,
                "step_fraction must lie in (0, 1), got {}",
                self.step_fraction
            );
        }
        if self.n_steps == 0 || self.interval_epochs == 0 {
            bail!(Config, "n_steps and interval_epochs must be at least 1");
        }
        Ok(())
    }

    /// `(1 - p)^k`
    pub fn remaining_fraction(&self, step: usize) -> f64 {
        (1.0 - self.step_fraction).powi(step as i32)
    }
}

/// Step counter plus the original per-layer sizes the geometric targets
/// are measured against.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub schedule: PruneSchedule,
    /// Number of prune steps already applied.
    pub completed: usize,
    original: Vec<usize>,
}

impl ScheduleState {
    pub fn new(model: &Encoder, schedule: PruneSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            completed: 0,
            original: model
                .prunable_parameters()
                .iter()
                .map(|l| l.numel())
                .collect(),
        })
    }

    /// A state over layers of the given sizes, independent of any model.
    pub fn from_sizes(sizes: Vec<usize>, schedule: PruneSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            completed: 0,
            original: sizes,
        })
    }

    pub fn original_total(&self) -> usize {
        self.original.iter().sum()
    }

    pub fn is_done(&self) -> bool {
        self.completed >= self.schedule.n_steps
    }

    /// Remaining weights layer `l` should hold after step `k`: `round(N_l·(1-p)^k)`,
    /// never below one.
    pub fn layer_target(&self, l: usize, k: usize) -> usize {
        ((self.original[l] as f64 * self.schedule.remaining_fraction(k)).round() as usize).max(1)
    }

    pub fn total_target(&self, k: usize) -> usize {
        ((self.original_total() as f64 * self.schedule.remaining_fraction(k)).round() as usize)
            .max(self.original.len())
    }
}

/// Audit record of one prune step.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneEvent {
    pub step: usize,
    pub criterion: String,
    pub removed: Vec<usize>,
    pub remaining: Vec<usize>,
    pub remaining_fraction: f64,
}

impl PruneEvent {
    pub const CSV_HEADER: &'static str = "step,criterion,removed_per_layer,remaining_fraction";

    pub fn csv_row(&self) -> String {
        let removed: Vec<String> = self.removed.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{:.9}",
            self.step,
            self.criterion,
            removed.join(";"),
            self.remaining_fraction
        )
    }
}

/// Running `Σ |∂ℓ/∂W|` per prunable layer over a window of batches.
#[derive(Clone, Debug)]
pub struct GradientAccumulator {
    sums: Vec<Vec<f64>>,
    batches: usize,
}

impl GradientAccumulator {
    pub fn new(model: &Encoder) -> Self {
        Self {
            sums: model
                .prunable_parameters()
                .iter()
                .map(|l| vec![0.0; l.numel()])
                .collect(),
            batches: 0,
        }
    }

    /// Adds one batch of gradients, one slice per prunable layer.
    pub fn add_batch<'a>(&mut self, grads: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let mut n = 0;
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            if sum.len() != g.len() {
                bail!(
                    Dimension,
                    "gradient of {} for {} weights",
                    g.len(),
                    sum.len()
                );
            }
            for (s, x) in sum.iter_mut().zip(g) {
                *s += x.abs();
            }
            n += 1;
        }
        if n != self.sums.len() {
            bail!(
                Dimension,
                "{n} gradient slices for {} layers",
                self.sums.len()
            );
        }
        self.batches += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        for s in &mut self.sums {
            s.fill(0.0);
        }
        self.batches = 0;
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.sums[l]
    }
}

/// Scores every prunable layer with `criterion`.
pub fn score_model(
    model: &Encoder,
    criterion: CriterionSpec,
    rng: &mut impl Rng,
    gradients: Option<&GradientAccumulator>,
) -> Result<Vec<Vec<f64>>> {
    let layers = model.prunable_parameters();
    (0..layers.len())
        .map(|l| {
            let layer = &layers[l];
            match criterion.kind {
                CriterionKind::Random => Ok(score_random(layer, rng)),
                CriterionKind::Magnitude => Ok(score_magnitude(layer)),
                CriterionKind::GradientMagnitude => {
                    let acc = gradients.ok_or_else(|| {
                        Error::Contract("gradient criterion without an accumulator".into())
                    })?;
                    score_gradient_magnitude(layer, acc.layer(l), acc.batches())
                }
                CriterionKind::Lamp => Ok(score_lamp(layer)),
                CriterionKind::Lookahead => {
                    let (prev, next) = model.lookahead_neighbors(l);
                    score_lookahead(prev.map(|p| &layers[p]), layer, next.map(|n| &layers[n]))
                }
            }
        })
        .collect()
}

/// Picks, for each layer, which flat indices to prune so that after the
/// step the schedule's geometric target is met.
pub fn select(
    scores: &[Vec<f64>],
    criterion: CriterionSpec,
    state: &ScheduleState,
    remaining: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let k = state.completed + 1;
    if !criterion.pools_globally() {
        return scores
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let target = state.layer_target(l, k);
                bottom_k(s, remaining[l].saturating_sub(target))
            })
            .collect();
    }
    let total: usize = remaining.iter().sum();
    let want = total.saturating_sub(state.total_target(k));
    let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (l, s) in scores.iter().enumerate() {
        pool.extend(
            s.iter()
                .enumerate()
                .filter(|(_, &v)| v != PRUNED)
                .map(|(i, &v)| (v, l, i)),
        );
    }
    // ascending score, then ascending position in the concatenated order
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut left = remaining.to_vec();
    let mut picks = vec![Vec::new(); scores.len()];
    let mut taken = 0;
    for (_, l, i) in pool {
        if taken == want {
            break;
        }
        if left[l] <= 1 {
            continue;
        }
        left[l] -= 1;
        picks[l].push(i);
        taken += 1;
    }
    Ok(picks)
}

/// One prune step: score, select, flip mask bits, and zero the pruned weights.
pub fn select_and_apply(
    model: &mut Encoder,
    criterion: CriterionSpec,
    state: &mut ScheduleState,
    rng: &mut impl Rng,
    gradients: Option<&GradientAccumulator>,
) -> Result<PruneEvent> {
    criterion.validate()?;
    if state.is_done() {
        bail!(
            Contract,
            "schedule already completed {} steps",
            state.completed
        );
    }
    let scores = score_model(model, criterion, rng, gradients)?;
    let remaining: Vec<usize> = model
        .prunable_parameters()
        .iter()
        .map(|l| l.mask.remaining())
        .collect();
    let picks = select(&scores, criterion, state, &remaining)?;
    let mut removed = Vec::with_capacity(picks.len());
    for (layer, pick) in model.prunable_parameters_mut().iter_mut().zip(&picks) {
        for &i in pick {
            layer.mask.prune(i)?;
        }
        layer.apply_mask();
        removed.push(pick.len());
    }
    state.completed += 1;
    let remaining: Vec<usize> = model
        .prunable_parameters()
        .iter()
        .map(|l| l.mask.remaining())
        .collect();
    let remaining_fraction = remaining.iter().sum::<usize>() as f64 / state.original_total() as f64;
    Ok(PruneEvent {
        step: state.completed,
        criterion: criterion.name().to_string(),
        removed,
        remaining,
        remaining_fraction,
    })
}
