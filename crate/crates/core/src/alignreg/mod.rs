//! Alignment regularizers that pull pruned weights `W̃ = W⊙M` toward the
//! frozen reference `W_ref`, their analytic gradients, and the combined loss.
//!
//! Column `j` of a weight matrix is the incoming weight vector of unit `j`.

mod spectral;

pub use spectral::{kd_gap_measure, mirsky_gap, normalize_rows, singular_values, MAX_SWEEPS};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, Mask};
use crate::error::{bail, Error, Result};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_LAMBDA: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L2,
    CosineUnitwise,
    CosineLayerwise,
    Frobenius,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl RegularizerSpec {
    pub const fn new(kind: RegularizerKind, lambda: f64) -> Self {
        Self { kind, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(
                Config,
                "lambda must be finite and non-negative, got {}",
                self.lambda
            );
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            RegularizerKind::None => "none",
            RegularizerKind::L2 => "l2",
            RegularizerKind::CosineUnitwise => "cosine",
            RegularizerKind::CosineLayerwise => "cosine_layerwise",
            RegularizerKind::Frobenius => "frobenius",
        }
    }

    fn needs_reference(&self) -> bool {
        matches!(
            self.kind,
            RegularizerKind::CosineUnitwise
                | RegularizerKind::CosineLayerwise
                | RegularizerKind::Frobenius
        )
    }
}

impl fmt::Display for RegularizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a regularizer name; the strength is the default λ.
impl FromStr for RegularizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "none" => RegularizerKind::None,
            "l2" => RegularizerKind::L2,
            "cosine" | "cosine_unitwise" => RegularizerKind::CosineUnitwise,
            "cosine_layerwise" => RegularizerKind::CosineLayerwise,
            "frobenius" => RegularizerKind::Frobenius,
            _ => return Err(Error::Config(format!("unknown regularizer {s:?}"))),
        };
        Ok(Self::new(kind, DEFAULT_LAMBDA))
    }
}

/// A similarity value plus the number of zero-norm columns that were
/// counted as contributing 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rho {
    pub value: f64,
    pub zero_columns: usize,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        bail!(Dimension, "weight pair {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

struct ColumnStats {
    dot: Vec<f64>,
    norm_ref: Vec<f64>,
    norm_tilde: Vec<f64>,
}

fn column_stats(w_tilde: &Tensor, w: &Tensor) -> ColumnStats {
    let n = w.cols();
    let mut s = ColumnStats {
        dot: vec![0.0; n],
        norm_ref: vec![0.0; n],
        norm_tilde: vec![0.0; n],
    };
    for (rt, rw) in w_tilde.data().chunks(n).zip(w.data().chunks(n)) {
        for j in 0..n {
            s.dot[j] += rt[j] * rw[j];
            s.norm_ref[j] += rw[j] * rw[j];
            s.norm_tilde[j] += rt[j] * rt[j];
        }
    }
    s.norm_ref.iter_mut().for_each(|x| *x = x.sqrt());
    s.norm_tilde.iter_mut().for_each(|x| *x = x.sqrt());
    s
}

/// `(1/N) Σ_j |w_jᵀ w̃_j| / (‖w_j‖ ‖w̃_j‖)` over the `N` columns.
pub fn rho_unitwise(w_tilde: &Tensor, w: &Tensor) -> Result<Rho> {
    check_pair(w_tilde, w)?;
    let s = column_stats(w_tilde, w);
    let n = w.cols();
    let mut total = 0.0;
    let mut zero_columns = 0;
    for j in 0..n {
        let denom = s.norm_ref[j] * s.norm_tilde[j];
        if denom == 0.0 {
            zero_columns += 1;
        } else {
            total += s.dot[j].abs() / denom;
        }
    }
    Ok(Rho {
        value: total / n as f64,
        zero_columns,
    })
}

/// `|cos|` between the flattened matrices.
pub fn rho_layerwise(w_tilde: &Tensor, w: &Tensor) -> Result<Rho> {
    check_pair(w_tilde, w)?;
    let denom = w_tilde.frobenius_norm() * w.frobenius_norm();
    if denom == 0.0 {
        return Ok(Rho {
            value: 0.0,
            zero_columns: 1,
        });
    }
    let dot: f64 = w_tilde
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok(Rho {
        value: dot.abs() / denom,
        zero_columns: 0,
    })
}

/// `∂ρ_unitwise/∂W̃`:
/// `(1/N) sign(w_jᵀw̃_j) [ w_ij / (‖w_j‖‖w̃_j‖) − (w_jᵀw̃_j) w̃_ij / (‖w_j‖‖w̃_j‖³) ]`.
/// Zero-norm columns get a zero gradient and are counted.
pub fn cosine_reg_grad(w_tilde: &Tensor, w: &Tensor) -> Result<(Tensor, usize)> {
    check_pair(w_tilde, w)?;
    let s = column_stats(w_tilde, w);
    let n = w.cols();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut zero_columns = 0;
    for j in 0..n {
        let denom = s.norm_ref[j] * s.norm_tilde[j];
        if denom == 0.0 {
            zero_columns += 1;
            continue;
        }
        let sign = if s.dot[j] > 0.0 {
            1.0
        } else if s.dot[j] < 0.0 {
            -1.0
        } else {
            0.0
        };
        a[j] = sign / (n as f64 * denom);
        b[j] = sign * s.dot[j] / (n as f64 * denom * s.norm_tilde[j] * s.norm_tilde[j]);
    }
    let data = w_tilde
        .data()
        .iter()
        .zip(w.data())
        .enumerate()
        .map(|(f, (&t, &r))| {
            let j = f % n;
            a[j] * r - b[j] * t
        })
        .collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, zero_columns))
}

/// `∂ρ_layerwise/∂W̃`, the single-column case of [`cosine_reg_grad`] on the
/// flattened matrices.
pub fn cosine_layerwise_grad(w_tilde: &Tensor, w: &Tensor) -> Result<(Tensor, usize)> {
    check_pair(w_tilde, w)?;
    let flat = |t: &Tensor| Tensor::matrix(t.numel(), 1, t.data().to_vec());
    let (g, z) = cosine_reg_grad(&flat(w_tilde)?, &flat(w)?)?;
    Ok((Tensor::new(w.shape().to_vec(), g.into_data())?, z))
}

/// Unit-wise ρ and its gradient through the autodiff tape.
/// Requires every column of both matrices to be nonzero.
pub fn rho_unitwise_autodiff(w_tilde: &Tensor, w: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(w_tilde, w)?;
    let mut tape = Tape::new();
    let b = tape.leaf(&w_tilde.clone().with_requires_grad(true));
    let a = tape.constant(w.shape().to_vec(), w.data().to_vec())?;
    let ab = tape.mul(a, b)?;
    let dot = tape.col_sum(ab);
    let dot = tape.abs(dot);
    let aa = tape.mul(a, a)?;
    let na = tape.col_sum(aa);
    let na = tape.sqrt(na);
    let bb = tape.mul(b, b)?;
    let nb = tape.col_sum(bb);
    let nb = tape.sqrt(nb);
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    let rho = tape.mean(cos);
    tape.backward(rho)?;
    let grad = tape
        .grad(b)
        .ok_or_else(|| Error::Numerical("no gradient reached W̃".into()))?
        .to_vec();
    Ok((
        tape.scalar_value(rho),
        Tensor::new(w.shape().to_vec(), grad)?,
    ))
}

/// `‖W_ref − W̃‖²_F`
pub fn frobenius_reg(w_tilde: &Tensor, w_ref: &Tensor) -> Result<f64> {
    check_pair(w_tilde, w_ref)?;
    Ok(w_tilde
        .data()
        .iter()
        .zip(w_ref.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum())
}

/// `2(W̃ − W_ref)` with masked positions set to 0.
pub fn frobenius_reg_grad(w_tilde: &Tensor, w_ref: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_pair(w_tilde, w_ref)?;
    if mask.len() != w_tilde.numel() {
        bail!(
            Dimension,
            "mask of {} for {} weights",
            mask.len(),
            w_tilde.numel()
        );
    }
    let data = w_tilde
        .data()
        .iter()
        .zip(w_ref.data())
        .zip(mask.bits())
        .map(|((t, r), &k)| if k { 2.0 * (t - r) } else { 0.0 })
        .collect();
    Tensor::new(w_tilde.shape().to_vec(), data)
}

/// The regularizer's contribution to the loss, with its per-layer parts.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerTerm {
    /// Signed amount added to the cross-entropy.
    pub value: f64,
    /// ρ, `‖W_ref − W̃‖²_F` or `‖W̃‖²_F` per prunable layer, depending on the kind.
    pub per_layer: Vec<f64>,
    pub zero_columns: usize,
}

fn reference_of(model: &Encoder, l: usize) -> Result<&Tensor> {
    let layer = &model.prunable_parameters()[l];
    layer
        .ref_weight()
        .ok_or_else(|| Error::Contract(format!("{} has no reference snapshot", layer.name())))
}

/// Evaluates the regularizer term on the current weights.
pub fn regularizer_term(model: &Encoder, spec: &RegularizerSpec) -> Result<RegularizerTerm> {
    spec.validate()?;
    let layers = model.prunable_parameters();
    let count = layers.len() as f64;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut zero_columns = 0;
    for (l, layer) in layers.iter().enumerate() {
        let w_tilde = layer.effective_weight();
        let part = match spec.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::L2 => w_tilde.data().iter().map(|x| x * x).sum(),
            RegularizerKind::CosineUnitwise => {
                let r = rho_unitwise(&w_tilde, reference_of(model, l)?)?;
                zero_columns += r.zero_columns;
                r.value
            }
            RegularizerKind::CosineLayerwise => {
                let r = rho_layerwise(&w_tilde, reference_of(model, l)?)?;
                zero_columns += r.zero_columns;
                r.value
            }
            RegularizerKind::Frobenius => frobenius_reg(&w_tilde, reference_of(model, l)?)?,
        };
        per_layer.push(part);
    }
    let sum: f64 = per_layer.iter().sum();
    let value = match spec.kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::L2 => spec.lambda * sum,
        RegularizerKind::CosineUnitwise | RegularizerKind::CosineLayerwise => {
            -(spec.lambda / count) * sum
        }
        RegularizerKind::Frobenius => (spec.lambda / count) * sum,
    };
    Ok(RegularizerTerm {
        value,
        per_layer,
        zero_columns,
    })
}

/// `ce + term`, returned with the term.
pub fn total_loss(
    ce_loss: f64,
    model: &Encoder,
    spec: &RegularizerSpec,
) -> Result<(f64, RegularizerTerm)> {
    let term = regularizer_term(model, spec)?;
    Ok((ce_loss + term.value, term))
}

/// Adds the gradient of the regularizer term to each prunable weight's grad
/// buffer (masked positions stay untouched).
pub fn accumulate_regularizer_grads(model: &mut Encoder, spec: &RegularizerSpec) -> Result<usize> {
    spec.validate()?;
    if spec.kind == RegularizerKind::None || spec.lambda == 0.0 {
        return Ok(0);
    }
    if spec.needs_reference() && !model.has_reference() {
        bail!(
            Contract,
            "{} regularizer needs a reference snapshot",
            spec.name()
        );
    }
    let count = model.prunable_parameters().len() as f64;
    let mut zero_columns = 0;
    for layer in model.prunable_parameters_mut() {
        let w_tilde = layer.effective_weight();
        let mut grad = match spec.kind {
            RegularizerKind::None => unreachable!(),
            RegularizerKind::L2 => w_tilde.scale(2.0 * spec.lambda),
            RegularizerKind::CosineUnitwise | RegularizerKind::CosineLayerwise => {
                let reference = layer.ref_weight().expect("checked above");
                let (g, z) = if spec.kind == RegularizerKind::CosineUnitwise {
                    cosine_reg_grad(&w_tilde, reference)?
                } else {
                    cosine_layerwise_grad(&w_tilde, reference)?
                };
                zero_columns += z;
                g.scale(-spec.lambda / count)
            }
            RegularizerKind::Frobenius => {
                let reference = layer.ref_weight().expect("checked above");
                frobenius_reg_grad(&w_tilde, reference, &layer.mask)?.scale(spec.lambda / count)
            }
        };
        for (g, &k) in grad.data_mut().iter_mut().zip(layer.mask.bits()) {
            if !k {
                *g = 0.0;
            }
        }
        layer.weight.accumulate_grad(grad.data())?;
    }
    Ok(zero_columns)
}

/// Per-layer diagnostics of one prune step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: String,
    pub rho: f64,
    pub frobenius: f64,
    pub mirsky_lhs: f64,
    pub mirsky_rhs: f64,
    pub kd_weight: f64,
    pub kd_activation: f64,
}

impl LayerDiagnostics {
    pub const CSV_HEADER: &'static str =
        "step,layer,rho,frobenius,mirsky_lhs,mirsky_rhs,kd_weight,kd_activation";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.layer,
            self.rho,
            self.frobenius,
            self.mirsky_lhs,
            self.mirsky_rhs,
            self.kd_weight,
            self.kd_activation
        )
    }

    /// Whether the weight distortion is bounded by the activation distortion.
    pub fn kd_direction_holds(&self) -> bool {
        self.kd_weight <= self.kd_activation
    }
}

/// Alignment, spectral and distortion measurements for one layer.
/// `before` is the weight prior to the prune step, `mask` the mask after it,
/// and `z` the layer's (row-normalized) inputs.
pub fn layer_diagnostics(
    name: String,
    before: &Tensor,
    mask: &Mask,
    reference: &Tensor,
    z: &Tensor,
) -> Result<LayerDiagnostics> {
    let after = before.hadamard(&Tensor::new(before.shape().to_vec(), mask.as_f64())?)?;
    let rho = rho_unitwise(&after, reference)?.value;
    let frobenius = frobenius_reg(&after, reference)?;
    let (mirsky_lhs, mirsky_rhs) = mirsky_gap(reference, &after)?;
    if mirsky_lhs > mirsky_rhs + 1e-9 {
        bail!(
            Numerical,
            "{name}: singular value gap {mirsky_lhs} exceeds Frobenius distance {mirsky_rhs}"
        );
    }
    let (kd_weight, kd_activation) = kd_gap_measure(before, mask, &normalize_rows(z))?;
    Ok(LayerDiagnostics {
        layer: name,
        rho,
        frobenius,
        mirsky_lhs,
        mirsky_rhs,
        kd_weight,
        kd_activation,
    })
}
