mod common;

use common::oracles::{gram, power_iteration_eigenvalues, symmetric_eigenvalues};
use common::{central_difference, max_rel_err, rng, uniform_vec};
use proptest::prelude::*;
use prunekit::alignreg::{
    accumulate_regularizer_grads, cosine_layerwise_grad, cosine_reg_grad, frobenius_reg,
    mirsky_gap, regularizer_term, rho_layerwise, rho_unitwise, rho_unitwise_autodiff,
    singular_values, RegularizerKind, RegularizerSpec,
};
use prunekit::encoder::{Encoder, EncoderConfig};
use prunekit::tensor::Tensor;
use rand::Rng;

fn mat(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, uniform_vec(r, rows * cols, -2.0, 2.0)).unwrap()
}

fn rho_at(data: &[f64], w: &Tensor) -> f64 {
    rho_unitwise(&Tensor::new(w.shape().to_vec(), data.to_vec()).unwrap(), w)
        .unwrap()
        .value
}

/// The element-wise partial as printed with a `1/(N−1)` prefactor and the
/// reference matrix in the role of the differentiated argument.
fn printed_variant(w_tilde: &Tensor, w: &Tensor) -> Tensor {
    let n = w.cols();
    Tensor::from_fn(w.rows(), n, |i, j| {
        let (a, b) = (w.column(j), w_tilde.column(j));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot.signum() / (n as f64 - 1.0) * (b[i] / (na * nb) - dot * a[i] / (na.powi(3) * nb))
    })
}

#[test]
fn cosine_gradient_three_way_agreement() {
    let mut r = rng(21);
    for _ in 0..25 {
        let (rows, cols) = (r.random_range(2..=7), r.random_range(2..=7));
        let (t, w) = (mat(&mut r, rows, cols), mat(&mut r, rows, cols));
        let (analytic, zeros) = cosine_reg_grad(&t, &w).unwrap();
        assert_eq!(zeros, 0);
        let (value, auto) = rho_unitwise_autodiff(&t, &w).unwrap();
        assert!((value - rho_unitwise(&t, &w).unwrap().value).abs() < 1e-14);
        let fd = central_difference(t.data(), 1e-5, |x| rho_at(x, &w));
        assert!(max_rel_err(analytic.data(), &fd, 1e-3) < 1e-6);
        assert!(max_rel_err(analytic.data(), auto.data(), 1e-3) < 1e-10);
    }
}

#[test]
fn printed_prefactor_and_argument_disagree_with_finite_differences() {
    let mut r = rng(22);
    let (t, w) = (mat(&mut r, 6, 6), mat(&mut r, 6, 6));
    let fd = central_difference(t.data(), 1e-5, |x| rho_at(x, &w));
    let printed = printed_variant(&t, &w);
    assert!(max_rel_err(printed.data(), &fd, 1e-3) > 1e-2);
    // with the argument roles swapped back, only the prefactor differs
    let swapped = printed_variant(&w, &t);
    let rescaled: Vec<f64> = swapped.data().iter().map(|g| g * 5.0 / 6.0).collect();
    assert!(max_rel_err(&rescaled, &fd, 1e-3) < 1e-6);
}

#[test]
fn gradient_is_radial_null_at_reference() {
    let mut r = rng(23);
    let w = mat(&mut r, 6, 5);
    let (g, _) = cosine_reg_grad(&w, &w).unwrap();
    for j in 0..5 {
        let dot: f64 = g
            .column(j)
            .iter()
            .zip(w.column(j))
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-10);
    }
}

#[test]
fn gradient_scales_inversely_with_w_tilde() {
    let mut r = rng(24);
    let (t, w) = (mat(&mut r, 5, 4), mat(&mut r, 5, 4));
    let (g, _) = cosine_reg_grad(&t, &w).unwrap();
    for c in [0.1, 3.0, 40.0] {
        let (gc, _) = cosine_reg_grad(&t.scale(c), &w).unwrap();
        let expect: Vec<f64> = g.data().iter().map(|x| x / c).collect();
        assert!(max_rel_err(gc.data(), &expect, 1e-12) < 1e-12);
    }
}

#[test]
fn layerwise_gradient_matches_finite_differences() {
    let mut r = rng(25);
    let (t, w) = (mat(&mut r, 4, 5), mat(&mut r, 4, 5));
    let (g, _) = cosine_layerwise_grad(&t, &w).unwrap();
    let fd = central_difference(t.data(), 1e-5, |x| {
        rho_layerwise(&Tensor::new(w.shape().to_vec(), x.to_vec()).unwrap(), &w)
            .unwrap()
            .value
    });
    assert!(max_rel_err(g.data(), &fd, 1e-3) < 1e-6);
}

#[test]
fn small_ascent_step_increases_rho() {
    let mut r = rng(26);
    for _ in 0..50 {
        let (t, w) = (mat(&mut r, 6, 6), mat(&mut r, 6, 6));
        let (g, _) = cosine_reg_grad(&t, &w).unwrap();
        let stepped = t.add(&g.scale(1e-3)).unwrap();
        assert!(rho_unitwise(&stepped, &w).unwrap().value > rho_unitwise(&t, &w).unwrap().value);
    }
}

fn small_model() -> Encoder {
    Encoder::new(
        EncoderConfig {
            d_model: 6,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 8,
            input_dim: 3,
            n_classes: 2,
            max_seq_len: 2,
            ..EncoderConfig::default()
        },
        9,
    )
    .unwrap()
}

#[test]
fn model_regularizer_grads_match_finite_differences() {
    let mut model = small_model();
    model.snapshot_reference().unwrap();
    let mut r = rng(27);
    for l in model.prunable_parameters_mut() {
        for w in l.weight.data_mut() {
            *w += r.random_range(-0.2..0.2);
        }
        l.mask.prune(0).unwrap();
        l.apply_mask();
    }
    for kind in [
        RegularizerKind::L2,
        RegularizerKind::CosineUnitwise,
        RegularizerKind::CosineLayerwise,
        RegularizerKind::Frobenius,
    ] {
        let spec = RegularizerSpec::new(kind, 0.3);
        model.zero_grads();
        accumulate_regularizer_grads(&mut model, &spec).unwrap();
        for li in 0..model.prunable_parameters().len() {
            let base = model.prunable_parameters()[li].weight.data().to_vec();
            let mut probe = model.clone();
            let fd = central_difference(&base, 1e-5, |x| {
                probe.prunable_parameters_mut()[li]
                    .weight
                    .data_mut()
                    .copy_from_slice(x);
                regularizer_term(&probe, &spec).unwrap().value
            });
            let layer = &model.prunable_parameters()[li];
            let masked_fd: Vec<f64> = fd
                .iter()
                .zip(layer.mask.bits())
                .map(|(g, &k)| if k { *g } else { 0.0 })
                .collect();
            let err = max_rel_err(layer.weight.grad().unwrap(), &masked_fd, 1e-3);
            assert!(err < 1e-6, "{kind:?} layer {li}: {err}");
        }
    }
}

#[test]
fn regularizer_term_matches_independent_recount() {
    let mut model = small_model();
    model.snapshot_reference().unwrap();
    let mut r = rng(28);
    for l in model.prunable_parameters_mut() {
        for w in l.weight.data_mut() {
            *w *= r.random_range(0.5..1.5);
        }
    }
    let lambda = 5e-4;
    let count = model.prunable_parameters().len() as f64;
    let mut frob = 0.0;
    let mut rho = 0.0;
    let mut sq = 0.0;
    for l in model.prunable_parameters() {
        let (w, rf) = (l.weight.data(), l.ref_weight().unwrap().data());
        let cols = l.fan_out();
        frob += w.iter().zip(rf).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        sq += w.iter().map(|a| a * a).sum::<f64>();
        let mut per = 0.0;
        for j in 0..cols {
            let col = |d: &[f64]| {
                d.iter()
                    .skip(j)
                    .step_by(cols)
                    .copied()
                    .collect::<Vec<f64>>()
            };
            let (a, b) = (col(rf), col(w));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            per += dot.abs() / (na * nb);
        }
        rho += per / cols as f64;
    }
    let get = |k| {
        regularizer_term(&model, &RegularizerSpec::new(k, lambda))
            .unwrap()
            .value
    };
    assert!((get(RegularizerKind::Frobenius) - lambda / count * frob).abs() < 1e-12);
    assert!((get(RegularizerKind::CosineUnitwise) + lambda / count * rho).abs() < 1e-12);
    assert!((get(RegularizerKind::L2) - lambda * sq).abs() < 1e-12);
    assert_eq!(get(RegularizerKind::None), 0.0);
}

#[test]
fn singular_values_match_inertia_bisection() {
    let mut r = rng(29);
    for case in 0..40 {
        let (m, n) = if case % 2 == 0 {
            (8, 8)
        } else {
            (r.random_range(1..=4), r.random_range(1..=4))
        };
        let w = mat(&mut r, m, n);
        let sigma = singular_values(&w).unwrap();
        let eig = symmetric_eigenvalues(&gram(w.data(), m, n), n);
        for (s, e) in sigma.iter().zip(&eig) {
            assert!((s * s - e).abs() < 1e-8, "case {case}: {} vs {e}", s * s);
        }
    }
}

#[test]
fn singular_values_match_power_iteration_on_separated_spectra() {
    let mut r = rng(30);
    let mut checked = 0;
    while checked < 20 {
        let n = r.random_range(2..=4);
        let w = mat(&mut r, 4, n);
        let eig = symmetric_eigenvalues(&gram(w.data(), 4, n), n);
        let separated = eig.windows(2).all(|p| p[1] < 0.5 * p[0]);
        if !separated {
            continue;
        }
        checked += 1;
        let power = power_iteration_eigenvalues(&gram(w.data(), 4, n), n, 2000);
        let sigma = singular_values(&w).unwrap();
        for (s, p) in sigma.iter().zip(&power) {
            assert!((s * s - p).abs() < 1e-8);
        }
    }
}

#[test]
fn frobenius_identity_case() {
    assert_eq!(
        frobenius_reg(&Tensor::zeros(&[2, 2]), &Tensor::identity(2)).unwrap(),
        2.0
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rho_is_a_fraction(a in prop::collection::vec(-2.0f64..2.0, 12), b in prop::collection::vec(-2.0f64..2.0, 12)) {
        let (ta, tb) = (Tensor::matrix(3, 4, a).unwrap(), Tensor::matrix(3, 4, b).unwrap());
        for rho in [rho_unitwise(&ta, &tb).unwrap().value, rho_layerwise(&ta, &tb).unwrap().value] {
            prop_assert!((0.0..=1.0 + 1e-15).contains(&rho));
        }
    }

    #[test]
    fn singular_values_are_sorted_and_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 20)) {
        let s = singular_values(&Tensor::matrix(5, 4, a).unwrap()).unwrap();
        prop_assert!(s.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn mirsky_holds(a in prop::collection::vec(-3.0f64..3.0, 30), e in prop::collection::vec(-0.5f64..0.5, 30)) {
        let ta = Tensor::matrix(6, 5, a).unwrap();
        let tb = ta.add(&Tensor::matrix(6, 5, e).unwrap()).unwrap();
        let (lhs, rhs) = mirsky_gap(&ta, &tb).unwrap();
        prop_assert!(lhs <= rhs + 1e-9);
    }
}
