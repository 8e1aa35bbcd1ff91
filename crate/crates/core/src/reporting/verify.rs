//! Self-checks runnable from the command line: analytic gradients against
//! finite differences, the Mirsky inequality, and mask invariants.

use std::fmt;

use rand::Rng;

use crate::alignreg::{
    cosine_reg_grad, frobenius_reg, frobenius_reg_grad, mirsky_gap, rho_unitwise,
    rho_unitwise_autodiff, RegularizerKind, RegularizerSpec,
};
use crate::encoder::{Encoder, EncoderConfig, Mask};
use crate::error::Result;
use crate::harness::{stream_rng, train_step, AdamW};
use crate::pruning::{
    select_and_apply, CriterionKind, CriterionSpec, PruneSchedule, ScheduleState, Scope,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} (worst {:.3e})",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.total,
            self.worst
        )
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_difference(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest element-wise `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn reshaped(like: &Tensor, data: &[f64]) -> Result<Tensor> {
    Tensor::new(like.shape().to_vec(), data.to_vec())
}

/// Cosine gradient against central differences and the tape, on `cases`
/// random 6×6 pairs.
pub fn check_cosine_gradient(cases: usize, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, 1);
    let (mut passed, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let (t, w) = (uniform(&mut rng, 6, 6), uniform(&mut rng, 6, 6));
        let (analytic, _) = cosine_reg_grad(&t, &w)?;
        let fd = central_difference(t.data(), 1e-5, |x| {
            Ok(rho_unitwise(&reshaped(&t, x)?, &w)?.value)
        })?;
        let (_, auto) = rho_unitwise_autodiff(&t, &w)?;
        let err = max_relative_error(analytic.data(), &fd, 1e-3).max(max_relative_error(
            analytic.data(),
            auto.data(),
            1e-3,
        ));
        worst = worst.max(err);
        passed += usize::from(err < tol);
    }
    Ok(CheckResult {
        name: "cosine gradient",
        passed,
        total: cases,
        worst,
    })
}

/// Frobenius gradient against central differences under random masks.
pub fn check_frobenius_gradient(cases: usize, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, 2);
    let (mut passed, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (t, r) = (uniform(&mut rng, rows, cols), uniform(&mut rng, rows, cols));
        let keep: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.7)).collect();
        let mask = Mask::from_bits(rows, cols, keep.clone())?;
        let analytic = frobenius_reg_grad(&t, &r, &mask)?;
        let fd = central_difference(t.data(), 1e-2, |x| frobenius_reg(&reshaped(&t, x)?, &r))?;
        let fd: Vec<f64> = fd
            .iter()
            .zip(&keep)
            .map(|(&g, &k)| if k { g } else { 0.0 })
            .collect();
        let err = max_relative_error(analytic.data(), &fd, 1e-3);
        worst = worst.max(err);
        passed += usize::from(err < tol);
    }
    Ok(CheckResult {
        name: "frobenius gradient",
        passed,
        total: cases,
        worst,
    })
}

fn tiny_encoder(seed: u64) -> Result<Encoder> {
    Encoder::new(
        EncoderConfig {
            d_model: 4,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 6,
            input_dim: 3,
            n_classes: 3,
            max_seq_len: 3,
            ..EncoderConfig::default()
        },
        seed,
    )
}

fn encoder_loss(model: &Encoder, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    Ok(tape.scalar_value(loss))
}

/// Backpropagated cross-entropy gradient of every encoder parameter against
/// central differences. One case per seed.
pub fn check_encoder_gradient(cases: usize, tol: f64, seed: u64) -> Result<CheckResult> {
    let (mut passed, mut worst) = (0, 0.0f64);
    for case in 0..cases {
        let mut model = tiny_encoder(seed.wrapping_add(case as u64))?;
        let mut rng = stream_rng(seed.wrapping_add(case as u64), 3);
        let x = Tensor::new(
            vec![2, 3, 3],
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let labels = [rng.random_range(0..3), rng.random_range(0..3)];
        model.zero_grads();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &pass)?;
        let mut case_err = 0.0f64;
        for id in model.param_ids() {
            let analytic = model
                .param(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_default();
            let base = model.param(id).data().to_vec();
            let mut probe = model.clone();
            let fd = central_difference(&base, 1e-5, |v| {
                probe.param_mut(id).data_mut().copy_from_slice(v);
                encoder_loss(&probe, &x, &labels)
            })?;
            let analytic = if analytic.is_empty() {
                vec![0.0; fd.len()]
            } else {
                analytic
            };
            case_err = case_err.max(max_relative_error(&analytic, &fd, 1e-4));
        }
        worst = worst.max(case_err);
        passed += usize::from(case_err < tol);
    }
    Ok(CheckResult {
        name: "encoder backpropagation",
        passed,
        total: cases,
        worst,
    })
}

/// `‖Σ_A − Σ_{A+E}‖_F ≤ ‖E‖_F + 1e-9` on random pairs up to 16×16, with
/// perturbation scales spanning five decades.
pub fn check_mirsky(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, 4);
    let (mut passed, mut worst) = (0, f64::NEG_INFINITY);
    for _ in 0..cases {
        let (rows, cols) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let a = uniform(&mut rng, rows, cols);
        let scale = 10f64.powf(rng.random_range(-4.0..1.0));
        let e = uniform(&mut rng, rows, cols).scale(scale);
        let (lhs, rhs) = mirsky_gap(&a, &a.add(&e)?)?;
        worst = worst.max(lhs - rhs);
        passed += usize::from(lhs <= rhs + 1e-9);
    }
    Ok(CheckResult {
        name: "mirsky inequality",
        passed,
        total: cases,
        worst,
    })
}

/// Runs a full magnitude schedule on a default-size encoder and checks every
/// layer's remaining count against `N_l · (1-p)^k` after each step.
/// Worst is the largest per-layer deviation in weights.
pub fn check_schedule(seed: u64) -> Result<(CheckResult, f64)> {
    let mut model = Encoder::new(EncoderConfig::default(), seed)?;
    let schedule = PruneSchedule::default();
    let mut state = ScheduleState::new(&model, schedule.clone())?;
    let sizes: Vec<usize> = model
        .prunable_parameters()
        .iter()
        .map(|l| l.numel())
        .collect();
    let total: usize = sizes.iter().sum();
    let mut rng = stream_rng(seed, 5);
    let crit = CriterionSpec::new(CriterionKind::Magnitude, Scope::LayerWise);
    let (mut passed, mut checks, mut worst) = (0, 0, 0.0f64);
    for k in 1..=schedule.n_steps {
        select_and_apply(&mut model, crit, &mut state, &mut rng, None)?;
        for (layer, &n) in model.prunable_parameters().iter().zip(&sizes) {
            let dev =
                (layer.mask.remaining() as f64 - n as f64 * schedule.remaining_fraction(k)).abs();
            worst = worst.max(dev);
            checks += 1;
            passed += usize::from(dev <= 1.0);
        }
    }
    let fraction = model.remaining_prunable() as f64 / total as f64;
    Ok((
        CheckResult {
            name: "schedule per-layer counts",
            passed,
            total: checks,
            worst,
        },
        fraction,
    ))
}

/// Prunes half of every layer, then takes `steps` optimizer updates under
/// `reg` and checks that every masked entry is bit-for-bit `+0.0` after each.
pub fn check_masked_stay_zero(
    reg: RegularizerSpec,
    steps: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut model = tiny_encoder(seed)?;
    model.snapshot_reference()?;
    let mut rng = stream_rng(seed, 6);
    let schedule = PruneSchedule {
        step_fraction: 0.5,
        n_steps: 1,
        ..PruneSchedule::default()
    };
    let mut state = ScheduleState::new(&model, schedule)?;
    let crit = CriterionSpec::new(CriterionKind::Random, Scope::LayerWise);
    select_and_apply(&mut model, crit, &mut state, &mut rng, None)?;
    let mut opt = AdamW::new(&model, 1e-2, 0.01);
    let (mut passed, mut worst) = (0, 0.0f64);
    for _ in 0..steps {
        let x = Tensor::new(
            vec![4, 3, 3],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        train_step(&mut model, &mut opt, &x, &labels, &reg, None)?;
        let mut clean = true;
        for layer in model.prunable_parameters() {
            for (w, keep) in layer.weight.data().iter().zip(layer.mask.bits()) {
                if !keep && w.to_bits() != 0 {
                    clean = false;
                    worst = worst.max(w.abs());
                }
            }
        }
        passed += usize::from(clean);
    }
    Ok(CheckResult {
        name: match reg.kind {
            RegularizerKind::None => "masked zeros (none)",
            RegularizerKind::L2 => "masked zeros (l2)",
            RegularizerKind::CosineUnitwise => "masked zeros (cosine)",
            RegularizerKind::CosineLayerwise => "masked zeros (cosine_layerwise)",
            RegularizerKind::Frobenius => "masked zeros (frobenius)",
        },
        passed,
        total: steps,
        worst,
    })
}

/// Every suite with its default sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        check_cosine_gradient(100, 1e-6, seed)?,
        check_frobenius_gradient(100, 1e-7, seed)?,
        check_encoder_gradient(3, 1e-5, seed)?,
        check_mirsky(500, seed)?,
    ];
    let (sched, fraction) = check_schedule(seed)?;
    out.push(sched);
    out.push(CheckResult {
        name: "final remaining fraction within 0.314 ± 0.005",
        passed: usize::from((fraction - 0.314).abs() <= 0.005),
        total: 1,
        worst: fraction,
    });
    for kind in [
        RegularizerKind::None,
        RegularizerKind::L2,
        RegularizerKind::CosineUnitwise,
        RegularizerKind::CosineLayerwise,
        RegularizerKind::Frobenius,
    ] {
        let reg = RegularizerSpec { kind, lambda: 0.05 };
        out.push(check_masked_stay_zero(reg, 200, seed)?);
    }
    Ok(out)
}
