//! Synthetic "languages": one shared class structure seen through different
//! orthogonal rotations of the input space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::encoder::TaskKind;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// A seeded generator for one purpose. Different `stream`s of the same seed
/// are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `exp(A)` by scaling and squaring with a degree-18 Taylor core.
pub fn matrix_exponential(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        bail!(Dimension, "matrix exponential of {:?}", a.shape());
    }
    let norm = a.frobenius_norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.scale(0.5f64.powi(squarings));
    let mut result = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for k in 1..=18 {
        term = term.matmul(&scaled)?.scale(1.0 / k as f64);
        result = result.add(&term)?;
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// Random antisymmetric generator with `N(0, 1/d)` entries above the diagonal.
pub fn random_antisymmetric(d: usize, rng: &mut impl Rng) -> Tensor {
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in i + 1..d {
            let x: f64 = StandardNormal.sample(rng);
            a.set(i, j, x * scale);
            a.set(j, i, -x * scale);
        }
    }
    a
}

#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub id: usize,
    /// Rotation angle along the shared generator.
    pub theta: f64,
    /// Orthogonal `d × d`; inputs are `x = Q v` for base samples `v`.
    pub rotation: Tensor,
    /// Per-(class, position) shift added before rotation, `[c·n × d]`.
    pub offsets: Tensor,
    pub seed: u64,
}

/// Shared class prototypes, one `d`-vector per (class, position).
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub n_classes: usize,
    pub seq_len: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl Prototypes {
    pub fn random(
        n_classes: usize,
        seq_len: usize,
        dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let data = (0..n_classes * seq_len * dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                scale * x
            })
            .collect::<Vec<f64>>();
        Self {
            n_classes,
            seq_len,
            dim,
            data,
        }
    }

    pub fn get(&self, class: usize, pos: usize) -> &[f64] {
        let at = (class * self.seq_len + pos) * self.dim;
        &self.data[at..at + self.dim]
    }
}

/// Everything needed to draw samples for each language of one run.
#[derive(Clone, Debug)]
pub struct World {
    pub prototypes: Prototypes,
    pub languages: Vec<SyntheticLanguage>,
    pub noise_sigma: f64,
    pub task_kind: TaskKind,
}

impl World {
    /// Languages `k = 0..K` at angles `angle_step · (k + 1)` along one
    /// random generator.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_languages: usize,
        n_classes: usize,
        seq_len: usize,
        dim: usize,
        prototype_scale: f64,
        angle_step: f64,
        noise_sigma: f64,
        task_kind: TaskKind,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, 11);
        let prototypes = Prototypes::random(n_classes, seq_len, dim, prototype_scale, &mut rng);
        let generator = random_antisymmetric(dim, &mut rng);
        let languages = (0..n_languages)
            .map(|k| {
                let theta = angle_step * (k + 1) as f64;
                Ok(SyntheticLanguage {
                    id: k,
                    theta,
                    rotation: matrix_exponential(&generator.scale(theta))?,
                    offsets: Tensor::zeros(&[n_classes * seq_len, dim]),
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prototypes,
            languages,
            noise_sigma,
            task_kind,
        })
    }

    pub fn identity_language(&self, id: usize) -> SyntheticLanguage {
        let d = self.prototypes.dim;
        SyntheticLanguage {
            id,
            theta: 0.0,
            rotation: Tensor::identity(d),
            offsets: Tensor::zeros(&[self.prototypes.n_classes * self.prototypes.seq_len, d]),
            seed: 0,
        }
    }
}

/// Inputs `[n × seq × d]` with one label per sample (sequence tasks) or per
/// position (token tasks).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_per_sample(&self) -> usize {
        self.labels.len() / self.len().max(1)
    }

    /// Gathers samples `idx` into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.inputs.shape();
        let width = s[1] * s[2];
        let per = self.labels_per_sample();
        let mut data = Vec::with_capacity(idx.len() * width);
        let mut labels = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
            labels.extend_from_slice(&self.labels[i * per..(i + 1) * per]);
        }
        (
            Tensor::new(vec![idx.len(), s[1], s[2]], data).expect("batch shape"),
            labels,
        )
    }
}

/// Draws `n` stratified samples. The labels and base noise depend only on
/// `split_seed`, so two languages drawn with the same seed differ exactly by
/// their rotations.
pub fn generate_language_dataset(
    world: &World,
    lang: &SyntheticLanguage,
    n: usize,
    split_seed: u64,
) -> Result<Dataset> {
    let p = &world.prototypes;
    if n < p.n_classes {
        bail!(Config, "{n} samples cannot cover {} classes", p.n_classes);
    }
    let (seq, d) = (p.seq_len, p.dim);
    let mut rng = stream_rng(split_seed, 23);
    let noise = Normal::new(0.0, world.noise_sigma)
        .map_err(|e| crate::Error::Config(format!("noise sigma: {e}")))?;
    let per = match world.task_kind {
        crate::encoder::TaskKind::SequenceClassification => 1,
        crate::encoder::TaskKind::TokenClassification => seq,
    };
    // stratified: each label slot cycles through the classes, then shuffles
    let mut slots: Vec<Vec<usize>> = (0..per)
        .map(|_| (0..n).map(|i| i % p.n_classes).collect())
        .collect();
    for s in &mut slots {
        s.shuffle(&mut rng);
    }
    let q = &lang.rotation;
    let mut inputs = Vec::with_capacity(n * seq * d);
    let mut labels = Vec::with_capacity(n * per);
    let mut base = vec![0.0; d];
    for i in 0..n {
        for slot in &slots {
            labels.push(slot[i]);
        }
        for pos in 0..seq {
            let class = if per == 1 { slots[0][i] } else { slots[pos][i] };
            let proto = p.get(class, pos);
            let off = &lang.offsets.data()[(class * seq + pos) * d..(class * seq + pos + 1) * d];
            for k in 0..d {
                base[k] = proto[k] + off[k] + noise.sample(&mut rng);
            }
            for r in 0..d {
                let row = q.row(r);
                inputs.push(row.iter().zip(&base).map(|(a, b)| a * b).sum());
            }
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, seq, d], inputs)?,
        labels,
    })
}
