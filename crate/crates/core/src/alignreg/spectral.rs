//! Singular values and the two perturbation measurements: the Mirsky pair
//! and the weight-vs-activation distortion pair.

use crate::encoder::Mask;
use crate::error::{bail, Result};
use crate::tensor::{gelu_scalar, Tensor};

pub const MAX_SWEEPS: usize = 100;

/// Singular values in descending order.
///
/// Cyclic Jacobi rotations diagonalize `WᵀW`. They are applied one-sidedly to
/// the columns of `W`, so `WᵀW` is never formed and small singular values keep
/// full relative accuracy. At convergence the columns are mutually orthogonal
/// and their norms are the singular values.
pub fn singular_values(w: &Tensor) -> Result<Vec<f64>> {
    if w.shape().len() != 2 {
        bail!(Dimension, "singular values of a {:?} tensor", w.shape());
    }
    let (rows, cols_n) = (w.rows(), w.cols());
    // a wide matrix shares its nonzero singular values with its transpose
    let (m, n, source) = if rows < cols_n {
        (cols_n, rows, w.transpose())
    } else {
        (rows, cols_n, w.clone())
    };
    // column-major copy so rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| source.column(j)).collect();
    let tol = (m as f64 * f64::EPSILON).max(1e-15);
    let negligible = (f64::EPSILON * w.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (&x, &y) in cols[p].iter().zip(&cols[q]) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..m {
                    let (x, y) = (cp[i], cq[i]);
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        bail!(
            Numerical,
            "Jacobi sweeps did not converge after {MAX_SWEEPS} sweeps"
        );
    }
    let mut sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sigma.resize(cols_n, 0.0);
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// `(‖σ(A) − σ(B)‖₂, ‖A − B‖_F)`; the first never exceeds the second.
pub fn mirsky_gap(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let rhs = a.sub(b)?.frobenius_norm();
    let (sa, sb) = (singular_values(a)?, singular_values(b)?);
    let lhs = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok((lhs, rhs))
}

/// Scales every row with norm above 1 back onto the unit sphere.
pub fn normalize_rows(z: &Tensor) -> Tensor {
    let cols = z.cols();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// `(‖W − M⊙W‖_F, ‖gelu(ZW) − gelu(Z(M⊙W))‖_F)` for rows of `Z` inside the unit ball.
pub fn kd_gap_measure(weight: &Tensor, mask: &Mask, z: &Tensor) -> Result<(f64, f64)> {
    if mask.shape() != (weight.rows(), weight.cols()) {
        bail!(
            Dimension,
            "mask {:?} for weight {:?}",
            mask.shape(),
            weight.shape()
        );
    }
    if z.cols() != weight.rows() {
        bail!(
            Dimension,
            "Z {:?} into weight {:?}",
            z.shape(),
            weight.shape()
        );
    }
    for row in z.data().chunks(z.cols().max(1)) {
        if row.iter().map(|x| x * x).sum::<f64>() > 1.0 + 1e-12 {
            bail!(Contract, "rows of Z must have norm at most 1");
        }
    }
    let masked = weight.hadamard(&Tensor::new(weight.shape().to_vec(), mask.as_f64())?)?;
    let weight_gap = weight.sub(&masked)?.frobenius_norm();
    let full = z.matmul(weight)?.map(gelu_scalar);
    let pruned = z.matmul(&masked)?.map(gelu_scalar);
    Ok((weight_gap, full.sub(&pruned)?.frobenius_norm()))
}
