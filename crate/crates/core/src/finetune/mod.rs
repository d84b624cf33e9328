//! Desk-scale fine-tuning mechanics.
//!
//! Full-parameter fine-tuning (plain gradient descent on every weight) and
//! LoRA (frozen base plus a trainable low-rank update `ΔW = A·Bᵀ`) applied to
//! a single-head attention layer whose query, key and value projections are
//! the trainable set.

mod attention;
mod lora;
mod matrix;
pub mod tasks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use attention::{
    backward, forward, forward_cached, ForwardCache, Gradients, Projection, ProjectionGrad, ToyAttentionLayer,
};
pub use lora::{lora_delta, lora_init, lora_merge, LoraAdapter};
pub use matrix::WeightMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum FinetuneError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("rows of unequal length")]
    Ragged,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("rank {rank} must satisfy 1 <= r < min({d}, {k})")]
    Rank { rank: usize, d: usize, k: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("{0}")]
    ModeMismatch(&'static str),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("lora mode needs a rank")]
    MissingRank,
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("unknown mode `{0}`, expected fft or lora")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fft,
    Lora,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fft => "fft",
            Mode::Lora => "lora",
        })
    }
}

impl FromStr for Mode {
    type Err = FinetuneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fft" => Ok(Mode::Fft),
            "lora" => Ok(Mode::Lora),
            other => Err(FinetuneError::UnknownMode(other.to_string())),
        }
    }
}

/// `W − β·grad`. Inputs are not modified.
pub fn fft_step(w: &WeightMatrix, grad: &WeightMatrix, learning_rate: f64) -> Result<WeightMatrix, FinetuneError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(FinetuneError::LearningRate(learning_rate));
    }
    if !grad.is_finite() {
        return Err(FinetuneError::NonFinite("gradient"));
    }
    let out = w.sub(&grad.scale(learning_rate))?;
    if !out.is_finite() {
        return Err(FinetuneError::NonFinite("updated weights"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FinetuneError::LearningRate(self.learning_rate));
        }
        if self.mode == Mode::Lora && self.rank.is_none() {
            return Err(FinetuneError::MissingRank);
        }
        Ok(())
    }
}

/// One input sequence (n×d) and its regression target (n×k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionPair {
    pub input: WeightMatrix,
    pub target: WeightMatrix,
}

/// Mean squared error over every output entry of every pair.
pub fn mse_loss(layer: &ToyAttentionLayer, data: &[RegressionPair]) -> Result<f64, FinetuneError> {
    Ok(loss_and_gradients(layer, data, false)?.0)
}

/// Full-batch MSE and, when `with_grads`, its gradient.
pub fn loss_and_gradients(
    layer: &ToyAttentionLayer,
    data: &[RegressionPair],
    with_grads: bool,
) -> Result<(f64, Gradients), FinetuneError> {
    if data.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let count: usize = data.iter().map(|p| p.target.rows() * p.target.cols()).sum();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(layer);
    for pair in data {
        let cache = forward_cached(layer, &pair.input)?;
        let diff = cache.output.sub(&pair.target)?;
        total += diff.sum_squares();
        if with_grads {
            let upstream = diff.scale(2.0 / count as f64);
            grads.accumulate(&backward(layer, &cache, &upstream)?)?;
        }
    }
    Ok((total / count as f64, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedLayer {
    pub layer: ToyAttentionLayer,
    /// Loss before each step, followed by the loss after the last step
    /// (`steps + 1` entries).
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on the MSE loss.
///
/// In LoRA mode a plain layer first gets adapters attached from
/// `config.seed`; an already adapted layer is trained as-is. FFT mode needs a
/// plain layer.
pub fn train(
    layer: &ToyAttentionLayer,
    data: &[RegressionPair],
    config: &TrainConfig,
) -> Result<TrainedLayer, FinetuneError> {
    config.validate()?;
    if data.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let mut current = match (config.mode, layer.mode()) {
        (Mode::Fft, Mode::Fft) | (Mode::Lora, Mode::Lora) => layer.clone(),
        (Mode::Lora, Mode::Fft) => layer.with_lora(config.rank.ok_or(FinetuneError::MissingRank)?, config.seed)?,
        (Mode::Fft, Mode::Lora) => {
            return Err(FinetuneError::ModeMismatch("fft training needs a layer without adapters"))
        }
    };
    let mut trace = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let (loss, grads) = loss_and_gradients(&current, data, true)?;
        if !loss.is_finite() {
            return Err(FinetuneError::Divergence { step });
        }
        trace.push(loss);
        current = current
            .apply_gradients(&grads, config.learning_rate)
            .map_err(|e| match e {
                FinetuneError::NonFinite(_) => FinetuneError::Divergence { step },
                other => other,
            })?;
    }
    let final_loss = mse_loss(&current, data)?;
    if !final_loss.is_finite() {
        return Err(FinetuneError::Divergence { step: config.steps });
    }
    trace.push(final_loss);
    Ok(TrainedLayer {
        layer: current,
        loss_trace: trace,
    })
}

/// SHA-256 over the merged W_q, W_k, W_v entries (little-endian, row-major).
pub fn merged_checksum(layer: &ToyAttentionLayer) -> String {
    let mut h = Sha256::new();
    for w in layer.effective_weights() {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_step_scalar() {
        let w = WeightMatrix::from_rows(&[vec![1.0]]).unwrap();
        let g = WeightMatrix::from_rows(&[vec![2.0]]).unwrap();
        let out = fft_step(&w, &g, 0.1).unwrap();
        assert!((out.get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(w.get(0, 0), 1.0);
    }

    #[test]
    fn fft_step_zero_grad_is_fixpoint() {
        let w = WeightMatrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
        assert_eq!(fft_step(&w, &WeightMatrix::zeros(1, 2), 0.3).unwrap(), w);
    }

    #[test]
    fn fft_step_errors() {
        let w = WeightMatrix::zeros(1, 1);
        assert!(matches!(fft_step(&w, &w, 0.0), Err(FinetuneError::LearningRate(_))));
        assert!(fft_step(&w, &WeightMatrix::zeros(2, 1), 0.1).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let layer = ToyAttentionLayer::random(2, 2, 0);
        let data = tasks::linear_map_task(
            &WeightMatrix::from_rows(&[vec![1e3, 0.0], vec![0.0, 1e3]]).unwrap(),
            16,
            4,
        );
        let cfg = TrainConfig {
            learning_rate: 1e6,
            steps: 200,
            seed: 0,
            mode: Mode::Fft,
            rank: None,
        };
        assert!(matches!(train(&layer, &data, &cfg), Err(FinetuneError::Divergence { .. })));
    }

    #[test]
    fn empty_dataset_rejected() {
        let layer = ToyAttentionLayer::random(2, 2, 0);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            steps: 1,
            seed: 0,
            mode: Mode::Fft,
            rank: None,
        };
        assert_eq!(train(&layer, &[], &cfg), Err(FinetuneError::EmptyDataset));
    }

    #[test]
    fn lora_without_rank_rejected() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            steps: 1,
            seed: 0,
            mode: Mode::Lora,
            rank: None,
        };
        assert_eq!(cfg.validate(), Err(FinetuneError::MissingRank));
    }
}
