mod common;

use common::{central_difference, max_rel_err, rng, uniform_vec};
use proptest::prelude::*;
use prunekit::encoder::{Encoder, EncoderConfig, TaskKind};
use prunekit::tensor::{erf, gelu_scalar, Tape, Tensor, Var, GELU_MINIMIZER};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Builds `Σ c ⊙ op(inputs)` on a fresh tape and returns the loss value and
/// the analytic gradient for every input.
fn weighted_loss(
    inputs: &[(Vec<usize>, Vec<f64>)],
    weights_seed: u64,
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| {
            tape.leaf(
                &Tensor::new(s.clone(), d.clone())
                    .unwrap()
                    .with_requires_grad(true),
            )
        })
        .collect();
    let out = op(&mut tape, &vars);
    let n = tape.value(out).len();
    let mut r = rng(weights_seed);
    let c = tape
        .constant(tape.shape(out).to_vec(), uniform_vec(&mut r, n, -1.0, 1.0))
        .unwrap();
    let prod = tape.mul(out, c).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    (tape.scalar_value(loss), grads)
}

fn check_op(name: &str, shapes: &[Vec<usize>], seed: u64, op: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    let mut r = rng(seed);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|s| {
            (
                s.clone(),
                uniform_vec(&mut r, s.iter().product(), -2.0, 2.0),
            )
        })
        .collect();
    let (_, analytic) = weighted_loss(&inputs, seed + 1000, op);
    for (k, (shape, data)) in inputs.iter().enumerate() {
        let fd = central_difference(data, H, |probe| {
            let mut perturbed = inputs.clone();
            perturbed[k] = (shape.clone(), probe.to_vec());
            weighted_loss(&perturbed, seed + 1000, op).0
        });
        let err = max_rel_err(&analytic[k], &fd, 1e-3);
        assert!(err < TOL, "{name} input {k}: rel err {err:e}");
    }
}

#[test]
fn matmul_matches_finite_differences() {
    check_op("matmul", &[vec![3, 4], vec![4, 2]], 1, &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let s = vec![3, 4];
    check_op("add", &[s.clone(), s.clone()], 2, &|t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op("sub", &[s.clone(), s.clone()], 3, &|t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    check_op("mul", &[s.clone(), s.clone()], 4, &|t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_op("scale", std::slice::from_ref(&s), 5, &|t, v| t.scale(v[0], -1.7));
    check_op("gelu", std::slice::from_ref(&s), 6, &|t, v| t.gelu(v[0]));
    check_op("mul_const", std::slice::from_ref(&s), 7, &|t, v| {
        t.mul_const(v[0], (0..12).map(|i| (i % 2) as f64).collect())
            .unwrap()
    });
}

#[test]
fn div_sqrt_abs_match_finite_differences_away_from_singularities() {
    // shift denominators and radicands away from zero
    check_op("div", &[vec![2, 3], vec![2, 3]], 8, &|t, v| {
        let sq = t.mul(v[1], v[1]).unwrap();
        let one = t.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let den = t.add(sq, one).unwrap();
        t.div(v[0], den).unwrap()
    });
    check_op("sqrt", &[vec![2, 3]], 9, &|t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let one = t.constant(vec![2, 3], vec![0.5; 6]).unwrap();
        let s = t.add(sq, one).unwrap();
        t.sqrt(s)
    });
    check_op("abs", &[vec![2, 3]], 10, &|t, v| t.abs(v[0]));
}

#[test]
fn reductions_and_gathers_match_finite_differences() {
    check_op("col_sum", &[vec![4, 3]], 11, &|t, v| t.col_sum(v[0]));
    check_op("mean", &[vec![4, 3]], 12, &|t, v| t.mean(v[0]));
    check_op("sum_squares", &[vec![4, 3]], 13, &|t, v| {
        t.sum_squares(v[0])
    });
    check_op("select_rows", &[vec![5, 3]], 14, &|t, v| {
        t.select_rows(v[0], vec![4, 0, 4]).unwrap()
    });
    check_op("add_tiled", &[vec![6, 3], vec![2, 3]], 15, &|t, v| {
        t.add_tiled(v[0], v[1]).unwrap()
    });
    check_op("bias", &[vec![6, 3], vec![3]], 16, &|t, v| {
        t.add_tiled(v[0], v[1]).unwrap()
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    check_op(
        "layer_norm",
        &[vec![4, 5], vec![5], vec![5]],
        17,
        &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn attention_matches_finite_differences() {
    check_op(
        "attention",
        &[vec![6, 4], vec![6, 4], vec![6, 4]],
        18,
        &|t, v| t.attention(v[0], v[1], v[2], 3, 2).unwrap(),
    );
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let labels = [0usize, 2, 1, 1, 0];
    check_op("softmax_ce", &[vec![5, 3]], 19, &|t, v| {
        t.softmax_cross_entropy(v[0], &labels).unwrap()
    });
}

#[test]
fn layer_norm_output_statistics() {
    let mut r = rng(20);
    let mut tape = Tape::new();
    let x = tape
        .constant(vec![8, 16], uniform_vec(&mut r, 128, -3.0, 3.0))
        .unwrap();
    let g = tape.constant(vec![16], vec![1.0; 16]).unwrap();
    let s = tape.constant(vec![16], vec![0.0; 16]).unwrap();
    let y = tape.layer_norm(x, g, s).unwrap();
    for row in tape.value(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn gelu_matches_independent_erf_reference() {
    for i in 0..1000 {
        let z = -10.0 + 20.0 * i as f64 / 999.0;
        let reference = z / 2.0 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
        assert!((gelu_scalar(z) - reference).abs() < 1e-10, "z={z}");
    }
    assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
    assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
}

#[test]
fn erf_matches_high_precision_table() {
    // 40-digit reference values, frozen
    let table = [
        (-6.0, -0.999_999_999_999_999_978_48),
        (-3.2, -0.999_993_974_238_848_3),
        (-2.692_692_692_692_692_6, -0.999_859_928_810_877_7),
        (-1.5, -0.966_105_146_475_310_8),
        (-0.3, -0.328_626_759_459_127_4),
        (0.0, 0.0),
        (1e-9, 1.128_379_167_095_512_7e-9),
        (0.1, 0.112_462_916_018_284_9),
        (0.5, 0.520_499_877_813_046_5),
        (1.0, 0.842_700_792_949_714_9),
        (1.7, 0.983_790_458_590_774_5),
        (2.5, 0.999_593_047_982_555),
        (2.9999, 0.999_977_895_573_517_8),
        (3.0, 0.999_977_909_503_001_4),
        (3.7, 0.999_999_832_848_942_1),
        (4.5, 0.999_999_999_803_383_9),
        (6.0, 0.999_999_999_999_999_978_48),
    ];
    for (z, want) in table {
        assert!((erf(z) - want).abs() < 1e-15, "erf({z})");
    }
}

fn encoder_loss(model: &Encoder, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits, labels).unwrap();
    tape.scalar_value(loss)
}

fn check_encoder(cfg: EncoderConfig, labels: Vec<usize>, seed: u64) {
    let mut model = Encoder::new(cfg.clone(), seed).unwrap();
    // move off the symmetric init so norms and biases carry signal
    let mut r = rng(seed + 1);
    for id in model.param_ids() {
        for v in model.param_mut(id).data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let n = cfg.max_seq_len;
    let b = if cfg.task_kind == TaskKind::TokenClassification {
        labels.len() / n
    } else {
        labels.len()
    };
    let x = Tensor::new(
        vec![b, n, cfg.input_dim],
        uniform_vec(&mut r, b * n * cfg.input_dim, -2.0, 2.0),
    )
    .unwrap();

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &x).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    for (slot, id) in model.param_ids().into_iter().enumerate() {
        let analytic = tape.grad(pass.params[slot]).unwrap().to_vec();
        let original = model.param(id).data().to_vec();
        let fd = central_difference(&original, H, |probe| {
            let mut m = model.clone();
            m.param_mut(id).data_mut().copy_from_slice(probe);
            encoder_loss(&m, &x, &labels)
        });
        let err = max_rel_err(&analytic, &fd, 1e-3);
        assert!(err < 1e-4, "{}: rel err {err:e}", model.param_name(id));
    }
}

use rand::Rng;

#[test]
fn full_encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_ff: 12,
        input_dim: 5,
        n_classes: 3,
        max_seq_len: 3,
        task_kind: TaskKind::SequenceClassification,
    };
    check_encoder(cfg, vec![0, 2, 1], 31);
}

#[test]
fn token_task_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        d_model: 6,
        n_heads: 3,
        n_blocks: 1,
        d_ff: 7,
        input_dim: 4,
        n_classes: 3,
        max_seq_len: 3,
        task_kind: TaskKind::TokenClassification,
    };
    check_encoder(cfg, vec![0, 2, 1, 1, 0, 2], 41);
}

#[test]
fn default_encoder_gradients_match_finite_differences() {
    check_encoder(EncoderConfig::default(), vec![0, 3], 51);
}

#[test]
fn gelu_dips_below_zero_left_of_its_minimizer() {
    let min = gelu_scalar(GELU_MINIMIZER);
    assert!((min + 0.169_971_1).abs() < 1e-6);
    for z in [-0.8, -1.5, -4.0, -10.0] {
        assert!(gelu_scalar(z) > min);
        assert!(gelu_scalar(z) <= gelu_scalar(z - 0.1) + 1e-300 || z < -9.0);
    }
    assert!(prunekit::tensor::gelu_derivative(GELU_MINIMIZER).abs() < 1e-15);
}

proptest! {
    #[test]
    fn gelu_is_monotone_above_its_minimizer(mut zs in proptest::collection::vec(GELU_MINIMIZER..12.0, 2..64)) {
        zs.sort_by(f64::total_cmp);
        for w in zs.windows(2) {
            prop_assert!(gelu_scalar(w[0]) <= gelu_scalar(w[1]));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let model = Encoder::new(EncoderConfig::default(), seed).unwrap();
        let mut r = rng(seed);
        let x = Tensor::new(vec![2, 4, 16], uniform_vec(&mut r, 128, -1.0, 1.0)).unwrap();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = model.forward(&mut t1, &x).unwrap();
        let b = model.forward(&mut t2, &x).unwrap();
        let bits = |t: &Tape, v| t.value(v).iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&t1, a.logits), bits(&t2, b.logits));
    }
}
