//! A tiny post-norm transformer encoder whose linear layers follow the
//! query / key / value / attention-output / intermediate / block-output
//! taxonomy. Only those six kinds are prunable; the input embedding, the
//! positional table, layer-norm parameters and the classifier are not.

mod checkpoint;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    SequenceClassification,
    TokenClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub max_seq_len: usize,
    pub task_kind: TaskKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 64,
            input_dim: 16,
            n_classes: 4,
            max_seq_len: 4,
            task_kind: TaskKind::SequenceClassification,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff),
            ("input_dim", self.input_dim),
            ("n_classes", self.n_classes),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be at least 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            bail!(
                Config,
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.d_model < 2 {
            bail!(Config, "layer norm needs d_model >= 2");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    AttnOutput,
    Intermediate,
    BlockOutput,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Query,
        LayerKind::Key,
        LayerKind::Value,
        LayerKind::AttnOutput,
        LayerKind::Intermediate,
        LayerKind::BlockOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Query => "query",
            LayerKind::Key => "key",
            LayerKind::Value => "value",
            LayerKind::AttnOutput => "attn_output",
            LayerKind::Intermediate => "intermediate",
            LayerKind::BlockOutput => "block_output",
        }
    }

    fn position(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense binary mask; `true` keeps the weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            bail!(Dimension, "mask of {} bits for {rows}x{cols}", keep.len());
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn is_kept(&self, flat: usize) -> bool {
        self.keep[flat]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    /// Flips a kept entry to pruned. Masks never flip back.
    pub fn prune(&mut self, flat: usize) -> Result<()> {
        if !self.keep[flat] {
            bail!(Contract, "entry {flat} is already pruned");
        }
        self.keep[flat] = false;
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Weight matrix `N_{l-1} × N_l` (column `i` is the incoming weight vector of
/// unit `i`), its bias, its mask, and the frozen reference snapshot.
#[derive(Clone, Debug)]
pub struct PrunableLayer {
    pub kind: LayerKind,
    pub block: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Mask,
    ref_weight: Option<Tensor>,
}

impl PrunableLayer {
    pub fn new(kind: LayerKind, block: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.numel() != weight.cols() {
            bail!(
                Dimension,
                "layer weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            );
        }
        let mask = Mask::ones(weight.rows(), weight.cols());
        Ok(Self {
            kind,
            block,
            weight,
            bias,
            mask,
            ref_weight: None,
        })
    }

    pub fn name(&self) -> String {
        format!("blocks.{}.{}", self.block, self.kind)
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn numel(&self) -> usize {
        self.weight.numel()
    }

    /// `W ⊙ M`
    pub fn effective_weight(&self) -> Tensor {
        let data = self
            .weight
            .data()
            .iter()
            .zip(self.mask.bits())
            .map(|(&w, &k)| if k { w } else { 0.0 })
            .collect();
        Tensor::new(self.weight.shape().to_vec(), data).expect("mask matches weight")
    }

    pub fn ref_weight(&self) -> Option<&Tensor> {
        self.ref_weight.as_ref()
    }

    /// Zeroes stored weights (and their gradients) wherever the mask is 0.
    pub fn apply_mask(&mut self) {
        let keep = self.mask.bits();
        for (w, &k) in self.weight.data_mut().iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
        if let Some(g) = self.weight.grad_mut() {
            for (x, &k) in g.iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
        }
    }

    pub(crate) fn set_ref_weight(&mut self, r: Tensor) {
        self.ref_weight = Some(r);
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0).with_requires_grad(true),
            shift: Tensor::zeros(&[d]).with_requires_grad(true),
        }
    }
}

/// Addresses every parameter tensor of an [`Encoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Embedding,
    EmbeddingBias,
    Position,
    LayerWeight(usize),
    LayerBias(usize),
    NormGain(usize),
    NormShift(usize),
    Classifier,
    ClassifierBias,
}

/// Whether masks are applied in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Apply,
    Ignore,
}

/// Handles recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[b × c]` for sequence tasks, `[b × n × c]` for token tasks.
    pub logits: Var,
    /// Final hidden states that feed the classifier (`[b × d]` or `[(b·n) × d]`).
    pub pooled: Var,
    /// One var per parameter, in [`Encoder::param_ids`] order.
    pub params: Vec<Var>,
    /// Input rows seen by each prunable layer, in prunable order.
    pub layer_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    seed: u64,
    pub embedding: Tensor,
    pub embedding_bias: Tensor,
    pub position: Tensor,
    layers: Vec<PrunableLayer>,
    norms: Vec<Norm>,
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound)).with_requires_grad(true)
}

impl Encoder {
    /// Weights ~ U(-1/√fan_in, 1/√fan_in), biases 0, gains 1, fixed by `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embedding = uniform_init(&mut rng, config.input_dim, d);
        let embedding_bias = Tensor::zeros(&[d]).with_requires_grad(true);
        let position = uniform_init(&mut rng, d, config.max_seq_len)
            .transpose()
            .with_requires_grad(true);
        let mut layers = Vec::with_capacity(config.n_blocks * 6);
        let mut norms = Vec::with_capacity(config.n_blocks * 2);
        for block in 0..config.n_blocks {
            for kind in LayerKind::ALL {
                let (fan_in, fan_out) = match kind {
                    LayerKind::Intermediate => (d, config.d_ff),
                    LayerKind::BlockOutput => (config.d_ff, d),
                    _ => (d, d),
                };
                let w = uniform_init(&mut rng, fan_in, fan_out);
                let b = Tensor::zeros(&[fan_out]).with_requires_grad(true);
                layers.push(PrunableLayer::new(kind, block, w, b)?);
            }
            norms.push(Norm::new(d));
            norms.push(Norm::new(d));
        }
        let classifier = uniform_init(&mut rng, d, config.n_classes);
        let classifier_bias = Tensor::zeros(&[config.n_classes]).with_requires_grad(true);
        Ok(Self {
            config,
            seed,
            embedding,
            embedding_bias,
            position,
            layers,
            norms,
            classifier,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The prunable matrices, ordered block-major then by [`LayerKind::ALL`].
    /// Embeddings, norms and the classifier are never included.
    pub fn prunable_parameters(&self) -> &[PrunableLayer] {
        &self.layers
    }

    pub fn prunable_parameters_mut(&mut self) -> &mut [PrunableLayer] {
        &mut self.layers
    }

    pub fn norms(&self) -> &[Norm] {
        &self.norms
    }

    pub fn layer_index(&self, block: usize, kind: LayerKind) -> usize {
        block * LayerKind::ALL.len() + kind.position()
    }

    pub fn layer(&self, block: usize, kind: LayerKind) -> &PrunableLayer {
        &self.layers[self.layer_index(block, kind)]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            ParamId::Embedding,
            ParamId::EmbeddingBias,
            ParamId::Position,
        ];
        for l in 0..self.layers.len() {
            ids.push(ParamId::LayerWeight(l));
            ids.push(ParamId::LayerBias(l));
        }
        for n in 0..self.norms.len() {
            ids.push(ParamId::NormGain(n));
            ids.push(ParamId::NormShift(n));
        }
        ids.push(ParamId::Classifier);
        ids.push(ParamId::ClassifierBias);
        ids
    }

    /// Position of `id` within [`Encoder::param_ids`] (and [`ForwardPass::params`]).
    pub fn param_slot(&self, id: ParamId) -> usize {
        let l = self.layers.len();
        let n = self.norms.len();
        match id {
            ParamId::Embedding => 0,
            ParamId::EmbeddingBias => 1,
            ParamId::Position => 2,
            ParamId::LayerWeight(i) => 3 + 2 * i,
            ParamId::LayerBias(i) => 4 + 2 * i,
            ParamId::NormGain(i) => 3 + 2 * l + 2 * i,
            ParamId::NormShift(i) => 4 + 2 * l + 2 * i,
            ParamId::Classifier => 3 + 2 * l + 2 * n,
            ParamId::ClassifierBias => 4 + 2 * l + 2 * n,
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::Embedding => &self.embedding,
            ParamId::EmbeddingBias => &self.embedding_bias,
            ParamId::Position => &self.position,
            ParamId::LayerWeight(i) => &self.layers[i].weight,
            ParamId::LayerBias(i) => &self.layers[i].bias,
            ParamId::NormGain(i) => &self.norms[i].gain,
            ParamId::NormShift(i) => &self.norms[i].shift,
            ParamId::Classifier => &self.classifier,
            ParamId::ClassifierBias => &self.classifier_bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::Embedding => &mut self.embedding,
            ParamId::EmbeddingBias => &mut self.embedding_bias,
            ParamId::Position => &mut self.position,
            ParamId::LayerWeight(i) => &mut self.layers[i].weight,
            ParamId::LayerBias(i) => &mut self.layers[i].bias,
            ParamId::NormGain(i) => &mut self.norms[i].gain,
            ParamId::NormShift(i) => &mut self.norms[i].shift,
            ParamId::Classifier => &mut self.classifier,
            ParamId::ClassifierBias => &mut self.classifier_bias,
        }
    }

    pub fn param_name(&self, id: ParamId) -> String {
        match id {
            ParamId::Embedding => "embedding.weight".into(),
            ParamId::EmbeddingBias => "embedding.bias".into(),
            ParamId::Position => "position".into(),
            ParamId::LayerWeight(i) => format!("{}.weight", self.layers[i].name()),
            ParamId::LayerBias(i) => format!("{}.bias", self.layers[i].name()),
            ParamId::NormGain(i) => format!("blocks.{}.norm{}.gain", i / 2, i % 2 + 1),
            ParamId::NormShift(i) => format!("blocks.{}.norm{}.shift", i / 2, i % 2 + 1),
            ParamId::Classifier => "classifier.weight".into(),
            ParamId::ClassifierBias => "classifier.bias".into(),
        }
    }

    pub fn total_parameter_count(&self) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| self.param(id).numel())
            .sum()
    }

    /// Count of weights in the prunable matrices (biases are not pruned).
    pub fn prunable_count(&self) -> usize {
        self.layers.iter().map(PrunableLayer::numel).sum()
    }

    pub fn excluded_parameter_count(&self) -> usize {
        self.total_parameter_count() - self.prunable_count()
    }

    pub fn remaining_prunable(&self) -> usize {
        self.layers.iter().map(|l| l.mask.remaining()).sum()
    }

    pub fn has_reference(&self) -> bool {
        self.layers.iter().all(|l| l.ref_weight.is_some())
    }

    /// Freezes a copy of every prunable weight as its alignment reference.
    /// May be called only once.
    pub fn snapshot_reference(&mut self) -> Result<()> {
        if self.layers.iter().any(|l| l.ref_weight.is_some()) {
            bail!(Contract, "reference weights were already snapshotted");
        }
        for l in &mut self.layers {
            let r = Tensor::new(l.weight.shape().to_vec(), l.weight.data().to_vec())?;
            l.ref_weight = Some(r);
        }
        Ok(())
    }

    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            l.apply_mask();
        }
    }

    pub fn zero_grads(&mut self) {
        for id in self.param_ids() {
            self.param_mut(id).zero_grad();
        }
    }

    /// Neighbours along the value path used by lookahead scoring:
    /// value → attn_output → intermediate → block_output → next block's value.
    /// Query and key only look back to the previous block's output.
    pub fn lookahead_neighbors(&self, idx: usize) -> (Option<usize>, Option<usize>) {
        let layer = &self.layers[idx];
        let b = layer.block;
        let prev_out = (b > 0).then(|| self.layer_index(b - 1, LayerKind::BlockOutput));
        match layer.kind {
            LayerKind::Query | LayerKind::Key => (prev_out, None),
            LayerKind::Value => (prev_out, Some(self.layer_index(b, LayerKind::AttnOutput))),
            LayerKind::AttnOutput => (
                Some(self.layer_index(b, LayerKind::Value)),
                Some(self.layer_index(b, LayerKind::Intermediate)),
            ),
            LayerKind::Intermediate => (
                Some(self.layer_index(b, LayerKind::AttnOutput)),
                Some(self.layer_index(b, LayerKind::BlockOutput)),
            ),
            LayerKind::BlockOutput => (
                Some(self.layer_index(b, LayerKind::Intermediate)),
                (b + 1 < self.config.n_blocks).then(|| self.layer_index(b + 1, LayerKind::Value)),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardPass> {
        self.forward_with(tape, batch, MaskMode::Apply)
    }

    /// Runs the encoder on `batch` (`[b × n × input_dim]`).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: MaskMode,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let shape = batch.shape();
        if shape.len() != 3
            || shape[2] != cfg.input_dim
            || shape[1] == 0
            || shape[1] > cfg.max_seq_len
        {
            bail!(
                Dimension,
                "batch {:?} for input_dim {} and max_seq_len {}",
                shape,
                cfg.input_dim,
                cfg.max_seq_len
            );
        }
        let (b, n) = (shape[0], shape[1]);
        let params: Vec<Var> = self
            .param_ids()
            .into_iter()
            .map(|id| tape.leaf(self.param(id)))
            .collect();
        let p = |id: ParamId| params[self.param_slot(id)];

        let x = tape.constant(vec![b * n, cfg.input_dim], batch.data().to_vec())?;
        let mut h = tape.matmul(x, p(ParamId::Embedding))?;
        h = tape.add_tiled(h, p(ParamId::EmbeddingBias))?;
        let pos = tape.select_rows(p(ParamId::Position), (0..n).collect())?;
        h = tape.add_tiled(h, pos)?;

        let mut layer_inputs = vec![h; self.layers.len()];
        for block in 0..cfg.n_blocks {
            let idx = |k: LayerKind| self.layer_index(block, k);
            let mut linear = |tape: &mut Tape, input: Var, kind: LayerKind| -> Result<Var> {
                let i = idx(kind);
                layer_inputs[i] = input;
                let w = match mode {
                    MaskMode::Apply => {
                        tape.mul_const(p(ParamId::LayerWeight(i)), self.layers[i].mask.as_f64())?
                    }
                    MaskMode::Ignore => p(ParamId::LayerWeight(i)),
                };
                let y = tape.matmul(input, w)?;
                tape.add_tiled(y, p(ParamId::LayerBias(i)))
            };
            let q = linear(tape, h, LayerKind::Query)?;
            let k = linear(tape, h, LayerKind::Key)?;
            let v = linear(tape, h, LayerKind::Value)?;
            let a = tape.attention(q, k, v, n, cfg.n_heads)?;
            let o = linear(tape, a, LayerKind::AttnOutput)?;
            let r1 = tape.add(h, o)?;
            let n1 = 2 * block;
            let h1 = tape.layer_norm(r1, p(ParamId::NormGain(n1)), p(ParamId::NormShift(n1)))?;
            let f = linear(tape, h1, LayerKind::Intermediate)?;
            let f = tape.gelu(f);
            let f2 = linear(tape, f, LayerKind::BlockOutput)?;
            let r2 = tape.add(h1, f2)?;
            h = tape.layer_norm(
                r2,
                p(ParamId::NormGain(n1 + 1)),
                p(ParamId::NormShift(n1 + 1)),
            )?;
        }

        let pooled = match cfg.task_kind {
            TaskKind::SequenceClassification => {
                tape.select_rows(h, (0..b).map(|i| i * n).collect())?
            }
            TaskKind::TokenClassification => h,
        };
        let logits = tape.matmul(pooled, p(ParamId::Classifier))?;
        let mut logits = tape.add_tiled(logits, p(ParamId::ClassifierBias))?;
        if cfg.task_kind == TaskKind::TokenClassification {
            logits = tape.reshape(logits, vec![b, n, cfg.n_classes])?;
        }
        Ok(ForwardPass {
            logits,
            pooled,
            params,
            layer_inputs,
        })
    }

    /// Copies tape gradients of every parameter into the tensors' grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        for (id, &var) in self.param_ids().into_iter().zip(&pass.params) {
            if let Some(g) = tape.grad(var) {
                self.param_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
