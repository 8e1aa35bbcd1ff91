use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::data::{generate_language_dataset, stream_rng, Dataset, World};
use super::optim::AdamW;
use super::{mean_zero_shot, ExperimentConfig, MetricsRow, RowStatus};
use crate::alignreg::{
    accumulate_regularizer_grads, layer_diagnostics, regularizer_term, LayerDiagnostics,
    RegularizerSpec,
};
use crate::encoder::Encoder;
use crate::error::{bail, Error, Result};
use crate::pruning::{select_and_apply, GradientAccumulator, PruneEvent, ScheduleState};
use crate::tensor::{Tape, Tensor};

const EVAL_BATCH: usize = 256;

fn split_seed(seed: u64, language: usize, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((language as u64 + 1) << 20) ^ (split << 40)
}

/// Argmax predictions, one per label slot.
pub fn predict(model: &Encoder, data: &Dataset) -> Result<Vec<usize>> {
    let c = model.config().n_classes;
    let mut out = Vec::with_capacity(data.labels.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x)?;
        for row in tape.value(pass.logits).chunks(c) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of label slots predicted correctly.
pub fn evaluate(model: &Encoder, data: &Dataset) -> Result<f64> {
    let pred = predict(model, data)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.labels.len() as f64)
}

/// `counts[true][predicted]`
pub fn confusion_matrix(model: &Encoder, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let c = model.config().n_classes;
    let mut m = vec![vec![0; c]; c];
    for (p, &y) in predict(model, data)?.into_iter().zip(&data.labels) {
        m[y][p] += 1;
    }
    Ok(m)
}

/// One optimizer update on a batch. The optional accumulator receives the
/// cross-entropy gradients of the prunable weights. Returns the batch loss.
pub fn train_step(
    model: &mut Encoder,
    opt: &mut AdamW,
    x: &Tensor,
    labels: &[usize],
    reg: &RegularizerSpec,
    accumulator: Option<&mut GradientAccumulator>,
) -> Result<f64> {
    model.zero_grads();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let ce = tape.scalar_value(loss);
    if !ce.is_finite() {
        bail!(Numerical, "cross-entropy is {ce}");
    }
    tape.backward(loss)?;
    model.accumulate_grads(&tape, &pass)?;
    if let Some(acc) = accumulator {
        let grads: Vec<Vec<f64>> = model
            .prunable_parameters()
            .iter()
            .map(|l| {
                l.weight
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; l.numel()])
            })
            .collect();
        acc.add_batch(grads.iter().map(Vec::as_slice))?;
    }
    accumulate_regularizer_grads(model, reg)?;
    model.apply_masks();
    opt.step(model)?;
    model.apply_masks();
    Ok(ce)
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub val_accuracy: Vec<f64>,
}

/// Joint training on language-balanced batches until every language reaches
/// `target` validation accuracy or `cap` epochs pass; then the reference
/// snapshot is taken.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &mut Encoder,
    train: &[Dataset],
    val: &[Dataset],
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    cap: usize,
    target: f64,
    seed: u64,
) -> Result<PretrainReport> {
    if model.has_reference() {
        bail!(Contract, "pretrain expects a fresh model");
    }
    let mut opt = AdamW::new(model, lr, weight_decay);
    let mut rng = stream_rng(seed, 31);
    let none = RegularizerSpec::default();
    let mut report = PretrainReport {
        epochs: 0,
        final_loss: f64::NAN,
        val_accuracy: vec![],
    };
    for epoch in 1..=cap {
        // round-robin over per-language shuffles keeps every batch balanced
        let orders: Vec<Vec<usize>> = train.iter().map(|d| shuffled(d.len(), &mut rng)).collect();
        let longest = orders.iter().map(Vec::len).max().unwrap_or(0);
        let mut stream: Vec<(usize, usize)> = Vec::new();
        for i in 0..longest {
            for (l, o) in orders.iter().enumerate() {
                if let Some(&s) = o.get(i) {
                    stream.push((l, s));
                }
            }
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in stream.chunks(batch_size) {
            let (x, y) = mixed_batch(train, chunk);
            total += train_step(model, &mut opt, &x, &y, &none, None)?;
            batches += 1;
        }
        report.epochs = epoch;
        report.final_loss = total / batches as f64;
        report.val_accuracy = val
            .iter()
            .map(|d| evaluate(model, d))
            .collect::<Result<_>>()?;
        if report.val_accuracy.iter().all(|&a| a >= target) {
            break;
        }
    }
    let mean = report.val_accuracy.iter().sum::<f64>() / report.val_accuracy.len() as f64;
    if report.epochs == cap && mean < 0.6 {
        bail!(
            Setup,
            "pretraining reached the {cap}-epoch cap at mean validation accuracy {mean:.3}"
        );
    }
    model.zero_grads();
    model.snapshot_reference()?;
    Ok(report)
}

fn mixed_batch(sets: &[Dataset], picks: &[(usize, usize)]) -> (Tensor, Vec<usize>) {
    let parts: Vec<(Tensor, Vec<usize>)> =
        picks.iter().map(|&(l, i)| sets[l].batch(&[i])).collect();
    let shape = parts[0].0.shape().to_vec();
    let mut data = Vec::with_capacity(picks.len() * parts[0].0.numel());
    let mut labels = Vec::new();
    for (x, y) in parts {
        data.extend_from_slice(x.data());
        labels.extend(y);
    }
    (
        Tensor::new(vec![picks.len(), shape[1], shape[2]], data).expect("batch shape"),
        labels,
    )
}

/// A pretrained model together with the data of its seed.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub seed: u64,
    pub world: World,
    pub model: Encoder,
    pub report: PretrainReport,
    /// Fine-pruning split of every language (only the train language is used).
    pub finetune: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

/// Languages and every data split of one seed.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub world: World,
    pub pretrain: Vec<Dataset>,
    pub val: Vec<Dataset>,
    pub test: Vec<Dataset>,
    pub finetune: Vec<Dataset>,
}

pub fn build_data(config: &ExperimentConfig, seed: u64) -> Result<DataBundle> {
    config.validate()?;
    let enc = &config.encoder;
    let world = World::new(
        config.n_languages,
        enc.n_classes,
        enc.max_seq_len,
        enc.input_dim,
        config.prototype_scale,
        config.angle_step,
        config.noise_sigma,
        enc.task_kind,
        seed,
    )?;
    let split = |n: usize, s: u64, shared: bool| -> Result<Vec<Dataset>> {
        world
            .languages
            .iter()
            .map(|l| {
                let id = if shared { 0 } else { l.id };
                generate_language_dataset(&world, l, n, split_seed(seed, id, s))
            })
            .collect()
    };
    let pretrain = split(config.pretrain_samples, 0, false)?;
    let val = split(config.val_samples, 1, false)?;
    // test sets are rotations of one base sample, so accuracies compare paired
    let test = split(config.test_samples, 2, true)?;
    let finetune = split(config.train_samples, 3, false)?;
    Ok(DataBundle {
        world,
        pretrain,
        val,
        test,
        finetune,
    })
}

/// Builds the languages and datasets for `seed` and pretrains a fresh model.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Pretrained> {
    let data = build_data(config, seed)?;
    let mut model = Encoder::new(config.encoder.clone(), seed)?;
    let report = pretrain(
        &mut model,
        &data.pretrain,
        &data.val,
        config.batch_size,
        config.learning_rate,
        config.weight_decay,
        config.pretrain_epoch_cap,
        config.pretrain_target_accuracy,
        seed,
    )?;
    Ok(Pretrained {
        seed,
        world: data.world,
        model,
        report,
        finetune: data.finetune,
        test: data.test,
    })
}

/// Per-layer measurements taken at one prune step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct FinepruneOutput {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<PruneEvent>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub model: Encoder,
    pub aborted: bool,
}

fn probe_inputs(model: &Encoder, data: &Dataset, n: usize) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let (x, _) = data.batch(&idx);
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &x)?;
    Ok(pass.layer_inputs.iter().map(|&v| tape.tensor(v)).collect())
}

/// Retrains on the train language for `E` epochs per interval, pruning
/// before every interval but the first, and evaluates every language after
/// each interval.
pub fn fineprune(pre: &Pretrained, config: &ExperimentConfig) -> Result<FinepruneOutput> {
    config.validate()?;
    let seed = pre.seed;
    let mut model = pre.model.clone();
    let train = &pre.finetune[config.train_language];
    let mut opt = AdamW::new(&model, config.learning_rate, config.weight_decay);
    let mut state = ScheduleState::new(&model, config.schedule.clone())?;
    let mut acc = GradientAccumulator::new(&model);
    let mut batch_rng = stream_rng(seed, 41);
    let mut prune_rng = stream_rng(seed, 51);
    let mut out = FinepruneOutput {
        rows: Vec::new(),
        events: Vec::new(),
        diagnostics: Vec::new(),
        model: model.clone(),
        aborted: false,
    };
    let start = Instant::now();
    let row = |model: &Encoder, step: usize, ce: f64, status: RowStatus| -> Result<MetricsRow> {
        let ok = status == RowStatus::Ok;
        let language_accuracy: Vec<f64> = if ok {
            pre.test
                .iter()
                .map(|d| evaluate(model, d))
                .collect::<Result<_>>()?
        } else {
            vec![0.0; pre.test.len()]
        };
        let reg = if ok {
            regularizer_term(model, &config.regularizer)?.value
        } else {
            f64::NAN
        };
        Ok(MetricsRow {
            run_id: config.run_id.clone(),
            seed,
            criterion: config.criterion.name().into(),
            regularizer: config.regularizer.name().into(),
            step,
            remaining_fraction: model.remaining_prunable() as f64 / model.prunable_count() as f64,
            train_accuracy: language_accuracy[config.train_language],
            mean_zero_shot: mean_zero_shot(&language_accuracy, config.train_language),
            language_accuracy,
            ce_loss: ce,
            regularizer_value: reg,
            wall_ms: start.elapsed().as_millis() as u64,
            status,
        })
    };
    for interval in 0..=config.schedule.n_steps {
        if interval > 0 {
            let probe = if config.diagnostics {
                Some((
                    probe_inputs(&model, train, config.batch_size)?,
                    model
                        .prunable_parameters()
                        .iter()
                        .map(|l| l.effective_weight())
                        .collect::<Vec<_>>(),
                ))
            } else {
                None
            };
            let event = select_and_apply(
                &mut model,
                config.criterion,
                &mut state,
                &mut prune_rng,
                Some(&acc),
            )?;
            if let Some((inputs, before)) = probe {
                let layers = model
                    .prunable_parameters()
                    .iter()
                    .zip(before)
                    .zip(&inputs)
                    .map(|((l, b), z)| {
                        let reference = l
                            .ref_weight()
                            .ok_or_else(|| Error::Contract("missing reference".into()))?;
                        layer_diagnostics(l.name(), &b, &l.mask, reference, z)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.diagnostics.push(StepDiagnostics {
                    step: event.step,
                    layers,
                });
            }
            out.events.push(event);
        }
        let mut ce_sum = 0.0;
        let mut batches = 0;
        for epoch in 0..config.schedule.interval_epochs {
            let last = epoch + 1 == config.schedule.interval_epochs;
            if last {
                acc.reset();
                ce_sum = 0.0;
                batches = 0;
            }
            let order = shuffled(train.len(), &mut batch_rng);
            for chunk in order.chunks(config.batch_size) {
                let (x, y) = train.batch(chunk);
                let tracked = if last { Some(&mut acc) } else { None };
                match train_step(&mut model, &mut opt, &x, &y, &config.regularizer, tracked) {
                    Ok(ce) => {
                        ce_sum += ce;
                        batches += 1;
                    }
                    Err(Error::Numerical(_)) => {
                        out.rows
                            .push(row(&model, interval, f64::NAN, RowStatus::Aborted)?);
                        out.aborted = true;
                        out.model = model;
                        return Ok(out);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        out.rows.push(row(
            &model,
            interval,
            ce_sum / batches as f64,
            RowStatus::Ok,
        )?);
    }
    out.model = model;
    Ok(out)
}
