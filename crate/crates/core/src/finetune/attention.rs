use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{lora_init, lora_merge, LoraAdapter};
use super::{fft_step, FinetuneError, Mode, WeightMatrix};

/// One of the three attention projections: a plain trainable matrix (FFT) or
/// a frozen base with a low-rank adapter (LoRA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Full(WeightMatrix),
    Lora(LoraAdapter),
}

impl Projection {
    pub fn effective(&self) -> WeightMatrix {
        match self {
            Projection::Full(w) => w.clone(),
            Projection::Lora(ad) => lora_merge(ad).expect("adapter shapes are consistent"),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Projection::Full(w) => w.shape(),
            Projection::Lora(ad) => ad.base().shape(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Projection::Full(w) => w.rows() * w.cols(),
            Projection::Lora(ad) => ad.trainable_count(),
        }
    }
}

/// Single-head self-attention with trainable query/key/value projections and
/// an identity output projection:
///
/// `softmax(Q·Kᵀ / √d) · V` with `Q = X·W_q`, `K = X·W_k`, `V = X·W_v`,
/// where `X` is n×d (one token per row) and each projection is d×k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAttentionLayer {
    query: Projection,
    key: Projection,
    value: Projection,
}

impl ToyAttentionLayer {
    pub fn new(query: WeightMatrix, key: WeightMatrix, value: WeightMatrix) -> Result<Self, FinetuneError> {
        Self::from_projections(Projection::Full(query), Projection::Full(key), Projection::Full(value))
    }

    pub fn from_projections(query: Projection, key: Projection, value: Projection) -> Result<Self, FinetuneError> {
        if query.shape() != key.shape() || query.shape() != value.shape() {
            return Err(FinetuneError::Shape {
                op: "attention projections",
                left: query.shape(),
                right: if query.shape() != key.shape() { key.shape() } else { value.shape() },
            });
        }
        let modes = [&query, &key, &value].map(|p| matches!(p, Projection::Lora(_)));
        if modes.iter().any(|&m| m != modes[0]) {
            return Err(FinetuneError::ModeMismatch("projections mix FFT and LoRA"));
        }
        Ok(ToyAttentionLayer { query, key, value })
    }

    /// Projections with N(0, 1/d) entries.
    pub fn random(d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let q = WeightMatrix::random_normal(d, k, std, &mut rng);
        let kk = WeightMatrix::random_normal(d, k, std, &mut rng);
        let v = WeightMatrix::random_normal(d, k, std, &mut rng);
        ToyAttentionLayer {
            query: Projection::Full(q),
            key: Projection::Full(kk),
            value: Projection::Full(v),
        }
    }

    /// Freezes the current weights and attaches rank-`r` adapters to W_q, W_k
    /// and W_v (seeds `seed`, `seed+1`, `seed+2`).
    pub fn with_lora(&self, rank: usize, seed: u64) -> Result<Self, FinetuneError> {
        let (d, k) = self.dims();
        let attach = |p: &Projection, s: u64| -> Result<Projection, FinetuneError> {
            match p {
                Projection::Full(w) => Ok(Projection::Lora(lora_init(d, k, rank, s, w.clone())?)),
                Projection::Lora(_) => Err(FinetuneError::ModeMismatch("layer already carries adapters")),
            }
        };
        Ok(ToyAttentionLayer {
            query: attach(&self.query, seed)?,
            key: attach(&self.key, seed.wrapping_add(1))?,
            value: attach(&self.value, seed.wrapping_add(2))?,
        })
    }

    pub fn mode(&self) -> Mode {
        match self.query {
            Projection::Full(_) => Mode::Fft,
            Projection::Lora(_) => Mode::Lora,
        }
    }

    /// `(d, k)`: model (input) dimension and projection output dimension.
    pub fn dims(&self) -> (usize, usize) {
        self.query.shape()
    }

    pub fn model_dim(&self) -> usize {
        self.dims().0
    }

    pub fn query(&self) -> &Projection {
        &self.query
    }

    pub fn key(&self) -> &Projection {
        &self.key
    }

    pub fn value(&self) -> &Projection {
        &self.value
    }

    pub fn projections(&self) -> [&Projection; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn trainable_count(&self) -> usize {
        self.projections().iter().map(|p| p.trainable_count()).sum()
    }

    /// Effective `(W_q, W_k, W_v)` with adapters merged.
    pub fn effective_weights(&self) -> [WeightMatrix; 3] {
        [self.query.effective(), self.key.effective(), self.value.effective()]
    }

    /// Plain FFT layer with the merged weights.
    pub fn merged(&self) -> Self {
        let [q, k, v] = self.effective_weights();
        ToyAttentionLayer {
            query: Projection::Full(q),
            key: Projection::Full(k),
            value: Projection::Full(v),
        }
    }

    /// One gradient-descent step on every trainable parameter. Returns a new
    /// layer; LoRA base matrices are carried over unchanged.
    pub fn apply_gradients(&self, grads: &Gradients, learning_rate: f64) -> Result<Self, FinetuneError> {
        let step = |p: &Projection, g: &ProjectionGrad| -> Result<Projection, FinetuneError> {
            match (p, g) {
                (Projection::Full(w), ProjectionGrad::Full { w: gw }) => {
                    Ok(Projection::Full(fft_step(w, gw, learning_rate)?))
                }
                (Projection::Lora(ad), ProjectionGrad::Lora { a, b }) => {
                    let new_a = fft_step(ad.a(), a, learning_rate)?;
                    let new_b = fft_step(ad.b(), b, learning_rate)?;
                    Ok(Projection::Lora(ad.with_factors(new_a, new_b)))
                }
                _ => Err(FinetuneError::ModeMismatch("gradient kind does not match projection")),
            }
        };
        Ok(ToyAttentionLayer {
            query: step(&self.query, &grads.query)?,
            key: step(&self.key, &grads.key)?,
            value: step(&self.value, &grads.value)?,
        })
    }
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: WeightMatrix,
    pub q: WeightMatrix,
    pub k: WeightMatrix,
    pub v: WeightMatrix,
    /// Row-wise softmax of the scaled scores, n×n.
    pub attention: WeightMatrix,
    pub output: WeightMatrix,
}

fn softmax_rows(m: &WeightMatrix) -> WeightMatrix {
    let (n, c) = m.shape();
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    WeightMatrix::from_raw(n, c, data)
}

pub fn forward_cached(layer: &ToyAttentionLayer, input: &WeightMatrix) -> Result<ForwardCache, FinetuneError> {
    let d = layer.model_dim();
    if input.cols() != d {
        return Err(FinetuneError::Shape {
            op: "forward",
            left: input.shape(),
            right: layer.dims(),
        });
    }
    let [wq, wk, wv] = layer.effective_weights();
    let q = input.matmul(&wq)?;
    let k = input.matmul(&wk)?;
    let v = input.matmul(&wv)?;
    let scores = q.matmul_transposed(&k)?.scale(1.0 / (d as f64).sqrt());
    let attention = softmax_rows(&scores);
    let output = attention.matmul(&v)?;
    Ok(ForwardCache {
        input: input.clone(),
        q,
        k,
        v,
        attention,
        output,
    })
}

/// Runs the layer on `input` (n×d, one token per row) and returns n×k.
pub fn forward(layer: &ToyAttentionLayer, input: &WeightMatrix) -> Result<WeightMatrix, FinetuneError> {
    Ok(forward_cached(layer, input)?.output)
}

/// Gradient for one projection. LoRA gradients cover only `A` and `B`; the
/// frozen base never receives one.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionGrad {
    Full { w: WeightMatrix },
    Lora { a: WeightMatrix, b: WeightMatrix },
}

impl ProjectionGrad {
    fn zeros_like(p: &Projection) -> Self {
        match p {
            Projection::Full(w) => ProjectionGrad::Full {
                w: WeightMatrix::zeros(w.rows(), w.cols()),
            },
            Projection::Lora(ad) => ProjectionGrad::Lora {
                a: WeightMatrix::zeros(ad.a().rows(), ad.a().cols()),
                b: WeightMatrix::zeros(ad.b().rows(), ad.b().cols()),
            },
        }
    }

    fn accumulate(&mut self, other: &ProjectionGrad) -> Result<(), FinetuneError> {
        match (self, other) {
            (ProjectionGrad::Full { w }, ProjectionGrad::Full { w: o }) => *w = w.add(o)?,
            (ProjectionGrad::Lora { a, b }, ProjectionGrad::Lora { a: oa, b: ob }) => {
                *a = a.add(oa)?;
                *b = b.add(ob)?;
            }
            _ => return Err(FinetuneError::ModeMismatch("accumulating mixed gradients")),
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ProjectionGrad::Full { w } => w.is_zero(),
            ProjectionGrad::Lora { a, b } => a.is_zero() && b.is_zero(),
        }
    }

    pub fn matrices(&self) -> Vec<&WeightMatrix> {
        match self {
            ProjectionGrad::Full { w } => vec![w],
            ProjectionGrad::Lora { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub query: ProjectionGrad,
    pub key: ProjectionGrad,
    pub value: ProjectionGrad,
}

impl Gradients {
    pub fn zeros_like(layer: &ToyAttentionLayer) -> Self {
        Gradients {
            query: ProjectionGrad::zeros_like(&layer.query),
            key: ProjectionGrad::zeros_like(&layer.key),
            value: ProjectionGrad::zeros_like(&layer.value),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), FinetuneError> {
        self.query.accumulate(&other.query)?;
        self.key.accumulate(&other.key)?;
        self.value.accumulate(&other.value)
    }

    pub fn all(&self) -> [&ProjectionGrad; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn is_zero(&self) -> bool {
        self.all().iter().all(|g| g.is_zero())
    }
}

fn project_grad(p: &Projection, dw: WeightMatrix) -> Result<ProjectionGrad, FinetuneError> {
    Ok(match p {
        Projection::Full(_) => ProjectionGrad::Full { w: dw },
        // W = W0 + A·Bᵀ  ⇒  ∂L/∂A = ∂L/∂W · B,  ∂L/∂B = (∂L/∂W)ᵀ · A
        Projection::Lora(ad) => ProjectionGrad::Lora {
            a: dw.matmul(ad.b())?,
            b: dw.transpose().matmul(ad.a())?,
        },
    })
}

/// Analytic gradients of the trainable parameters given `∂L/∂output`.
pub fn backward(
    layer: &ToyAttentionLayer,
    cache: &ForwardCache,
    upstream: &WeightMatrix,
) -> Result<Gradients, FinetuneError> {
    if upstream.shape() != cache.output.shape() {
        return Err(FinetuneError::Shape {
            op: "backward",
            left: upstream.shape(),
            right: cache.output.shape(),
        });
    }
    let scale = 1.0 / (layer.model_dim() as f64).sqrt();
    let p = &cache.attention;

    // O = P·V
    let d_p = upstream.matmul_transposed(&cache.v)?;
    let d_v = p.transpose().matmul(upstream)?;

    // softmax backward, row-wise: dS = P ⊙ (dP − rowsum(dP ⊙ P))
    let (n, _) = p.shape();
    let dp_p = d_p.hadamard(p)?;
    let mut ds = Vec::with_capacity(n * n);
    for i in 0..n {
        let dot: f64 = dp_p.row(i).iter().sum();
        for j in 0..n {
            ds.push(p.get(i, j) * (d_p.get(i, j) - dot));
        }
    }
    let d_s = WeightMatrix::from_raw(n, n, ds).scale(scale);

    // S = Q·Kᵀ·scale
    let d_q = d_s.matmul(&cache.k)?;
    let d_k = d_s.transpose().matmul(&cache.q)?;

    let xt = cache.input.transpose();
    Ok(Gradients {
        query: project_grad(&layer.query, xt.matmul(&d_q)?)?,
        key: project_grad(&layer.key, xt.matmul(&d_k)?)?,
        value: project_grad(&layer.value, xt.matmul(&d_v)?)?,
    })
}
