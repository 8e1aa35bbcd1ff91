use super::kernels;
use super::special::{gelu_derivative, gelu_scalar};
use super::Tensor;
use crate::error::{bail, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddTiled(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    Mean(Var),
    ColSum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so every input precedes its consumers and a reverse sweep visits
/// each operation once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            bail!(
                Dimension,
                "constant shape {:?} vs {} values",
                shape,
                data.len()
            );
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul {:?} x {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "element-wise op")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[m×n] + b[r×n]` where row `i` of `a` receives row `i mod r` of `b`.
    /// With `r = 1` this is a bias add; with `r = seq_len` a positional add.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        let (r, nb) = rows_cols(self.shape(b));
        if n != nb || r == 0 || m % r != 0 {
            bail!(
                Dimension,
                "tiled add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let brow = &bv[(i % r) * n..(i % r + 1) * n];
            for (o, &x) in row.iter_mut().zip(brow) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddTiled(a, b), rg))
    }

    /// Element-wise product with a constant of the same size (used for masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            bail!(Dimension, "constant of {} for {:?}", c.len(), self.shape(a));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_scalar)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            bail!(Dimension, "reshape {:?} -> {:?}", self.shape(a), shape);
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (m, d) = rows_cols(self.shape(x));
        if d < 2 || self.value(gain).len() != d || self.value(shift).len() != d {
            bail!(
                Dimension,
                "layer norm over {:?} with gain {:?} shift {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(shift)
            );
        }
        let (xv, g, s) = (self.value(x), self.value(gain), self.value(shift));
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + s[j];
            }
        }
        let rg = self.rg(&[x, gain, shift]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[(batch·seq) × d]`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (m, d) = rows_cols(self.shape(q));
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            bail!(Dimension, "attention operands differ in shape");
        }
        if seq == 0 || heads == 0 || m % seq != 0 || d % heads != 0 {
            bail!(
                Dimension,
                "attention over {m}x{d} with seq {seq}, heads {heads}"
            );
        }
        let batch = m / seq;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; m * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * inv;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / z;
                    }
                    let orow = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a));
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            bail!(Index, "row {bad} of {m}");
        }
        let av = self.value(a);
        let out: Vec<f64> = rows
            .iter()
            .flat_map(|&r| av[r * n..(r + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows.len(), n], out, Op::SelectRows(a, rows), rg))
    }

    /// Mean negative log-softmax of the true class over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = rows_cols(self.shape(logits));
        if labels.len() != b {
            bail!(Dimension, "{} labels for {} rows", labels.len(), b);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            bail!(Index, "label {bad} with {c} classes");
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let logz = max + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - logz).exp();
            }
            loss += logz - row[labels[i]];
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::SumSquares(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// Column sums: `[m×n] -> [1×n]`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![1, n], out, Op::ColSum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                bail!(Numerical, "non-finite gradient at node {idx}");
            }
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                let slot = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    kernels::matmul_a_bt(g, &nodes[b.0].value, slot!(*a), m, k, n);
                }
                if wants(*b) {
                    kernels::matmul_at_b(&nodes[a.0].value, g, slot!(*b), m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    for (s, x) in slot!(*a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
                if wants(*b) {
                    for (s, x) in slot!(*b).iter_mut().zip(g) {
                        *s += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    for ((s, x), y) in slot!(*a).iter_mut().zip(g).zip(bv) {
                        *s += x * y;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    for ((s, x), y) in slot!(*b).iter_mut().zip(g).zip(av) {
                        *s += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    for ((s, x), y) in slot!(*a).iter_mut().zip(g).zip(bv) {
                        *s += x / y;
                    }
                }
                if wants(*b) {
                    for (i, s) in slot!(*b).iter_mut().enumerate() {
                        *s -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if wants(*a) {
                    for (s, x) in slot!(*a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
                if wants(*b) {
                    let (r, n) = rows_cols(&nodes[b.0].shape);
                    let sb = slot!(*b);
                    for (i, row) in g.chunks(n).enumerate() {
                        let dst = &mut sb[(i % r) * n..(i % r + 1) * n];
                        for (s, x) in dst.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                }
            }
            Op::MulConst(a, c) => {
                for ((s, x), y) in slot!(*a).iter_mut().zip(g).zip(c) {
                    *s += x * y;
                }
            }
            Op::Scale(a, c) => {
                for (s, x) in slot!(*a).iter_mut().zip(g) {
                    *s += x * c;
                }
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                for ((s, x), z) in slot!(*a).iter_mut().zip(g).zip(av) {
                    *s += x * gelu_derivative(*z);
                }
            }
            Op::Abs(a) => {
                let av = &nodes[a.0].value;
                for ((s, x), z) in slot!(*a).iter_mut().zip(g).zip(av) {
                    // sign(0) = 0
                    let sgn = if *z > 0.0 {
                        1.0
                    } else if *z < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *s += x * sgn;
                }
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                for ((s, x), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *s += x * 0.5 / y;
                }
            }
            Op::Reshape(a) => {
                for (s, x) in slot!(*a).iter_mut().zip(g) {
                    *s += x;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let (m, d) = rows_cols(&nodes[x.0].shape);
                let gv = &nodes[gain.0].value;
                if wants(*gain) {
                    let sg = slot!(*gain);
                    for i in 0..m {
                        for j in 0..d {
                            sg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if wants(*shift) {
                    let ss = slot!(*shift);
                    for i in 0..m {
                        for j in 0..d {
                            ss[j] += g[i * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let sx = slot!(*x);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            sx[i * d + j] +=
                                rstd[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let (m, d) = rows_cols(&nodes[q.0].shape);
                let batch = m / seq;
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let row = |i: usize| (b * seq + i) * d + col;
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let gi = &g[row(i)..row(i) + dh];
                            let mut dot = 0.0;
                            for j in 0..seq {
                                let vj = &vv[row(j)..row(j) + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv[row(j)..row(j) + dh];
                                for (t, &x) in dvj.iter_mut().zip(gi) {
                                    *t += p[j] * x;
                                }
                            }
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[row(i) + t] += ds * kv[row(j) + t];
                                    dk[row(j) + t] += ds * qv[row(i) + t];
                                }
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        for (s, x) in slot!(var).iter_mut().zip(&grad) {
                            *s += x;
                        }
                    }
                }
            }
            Op::SelectRows(a, rows) => {
                let n = node.shape[1];
                let sa = slot!(*a);
                for (out_i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        sa[r * n + j] += g[out_i * n + j];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let sl = slot!(*logits);
                for i in 0..b {
                    for j in 0..c {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        sl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                for s in slot!(*a).iter_mut() {
                    *s += g[0];
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                for s in slot!(*a).iter_mut() {
                    *s += g[0] / n;
                }
            }
            Op::SumSquares(a) => {
                let av = &nodes[a.0].value;
                for (s, x) in slot!(*a).iter_mut().zip(av) {
                    *s += 2.0 * x * g[0];
                }
            }
            Op::ColSum(a) => {
                let (m, n) = rows_cols(&nodes[a.0].shape);
                let sa = slot!(*a);
                for i in 0..m {
                    for j in 0..n {
                        sa[i * n + j] += g[j];
                    }
                }
            }
        }
        Ok(())
    }
}
