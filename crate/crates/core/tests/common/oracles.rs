//! Independent brute-force references for the pruning criteria and the
//! spectral routines.

/// Flat indices of the `k` smallest scores among `live`, ties by index,
/// found by repeated linear minimum search.
pub fn bottom_k_by_scan(scores: &[f64], live: &[bool], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !live[i] || taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if scores[i] < scores[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("enough live entries");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// LAMP straight from the definition: each entry's square over the sum of
/// squares of all entries ranked at or above it.
pub fn lamp_by_definition(w: &[f64], live: &[bool]) -> Vec<f64> {
    let rank_ge = |i: usize, j: usize| {
        let (a, b) = (w[i].abs(), w[j].abs());
        b > a || (b == a && j >= i)
    };
    (0..w.len())
        .map(|i| {
            if !live[i] {
                return f64::NEG_INFINITY;
            }
            let denom: f64 = (0..w.len())
                .filter(|&j| live[j] && rank_ge(i, j))
                .map(|j| w[j] * w[j])
                .sum();
            if denom > 0.0 {
                w[i] * w[i] / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Lookahead score by enumerating every two-hop path `k → i → j → l` through
/// entry `(i, j)` and summing squared path products.
pub fn lookahead_by_paths(
    prev: Option<(&[f64], usize, usize)>,
    w: &[f64],
    rows: usize,
    cols: usize,
    next: Option<(&[f64], usize, usize)>,
    live: &[bool],
) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; w.len()];
    for i in 0..rows {
        for j in 0..cols {
            let f = i * cols + j;
            if !live[f] {
                continue;
            }
            let ins: Vec<f64> = match prev {
                Some((p, pr, pc)) => (0..pr).map(|k| p[k * pc + i]).collect(),
                None => vec![1.0],
            };
            let outs: Vec<f64> = match next {
                Some((n, _, nc)) => (0..nc).map(|l| n[j * nc + l]).collect(),
                None => vec![1.0],
            };
            let mut s = 0.0;
            for a in &ins {
                for b in &outs {
                    s += (a * b) * (a * b);
                }
            }
            out[f] = w[f].abs() * s.sqrt();
        }
    }
    out
}

/// Number of eigenvalues of symmetric `s` below `x`, from the signs of the
/// pivots of `s − xI` (Sylvester's law of inertia).
fn count_below(s: &[f64], n: usize, x: f64) -> usize {
    let mut a: Vec<f64> = s.to_vec();
    for i in 0..n {
        a[i * n + i] -= x;
    }
    let mut neg = 0;
    for k in 0..n {
        let mut piv = a[k * n + k];
        if piv == 0.0 {
            piv = -1e-300;
            a[k * n + k] = piv;
        }
        if piv < 0.0 {
            neg += 1;
        }
        for i in k + 1..n {
            let f = a[i * n + k] / piv;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    neg
}

/// Eigenvalues of symmetric `s` (descending) by bisection on the inertia count.
pub fn symmetric_eigenvalues(s: &[f64], n: usize) -> Vec<f64> {
    let bound = (0..n)
        .map(|i| (0..n).map(|j| s[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let mut out: Vec<f64> = (0..n)
        .map(|idx| {
            // idx-th smallest eigenvalue: smallest x with count_below(x) > idx
            let (mut lo, mut hi) = (-bound, bound);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if count_below(s, n, mid) > idx {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect();
    out.reverse();
    out
}

/// `AᵀA` for a row-major `m × n` matrix.
pub fn gram(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..m).map(|r| a[r * n + i] * a[r * n + j]).sum();
        }
    }
    g
}

/// Dominant eigenvalues of symmetric positive semi-definite `s` by power
/// iteration with deflation.
pub fn power_iteration_eigenvalues(s: &[f64], n: usize, iters: usize) -> Vec<f64> {
    let mut work = s.to_vec();
    let mut out = Vec::new();
    for e in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i + e) as f64)).collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| work[i * n + j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            v = w.iter().map(|x| x / norm).collect();
        }
        for i in 0..n {
            for j in 0..n {
                work[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        out.push(lambda);
    }
    out
}
