//! Synthetic regression tasks for the toy layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, RegressionPair, ToyAttentionLayer, WeightMatrix};

/// Single-token pairs `(x, x·target)` with `x ~ N(0, I)`.
///
/// With one token the attention weights are identically 1, so the layer
/// reduces to `x·W_v` and the MSE is a convex quadratic in `W_v`.
pub fn linear_map_task(target: &WeightMatrix, samples: usize, seed: u64) -> Vec<RegressionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let x = WeightMatrix::random_normal(1, target.rows(), 1.0, &mut rng);
            let y = x.matmul(target).expect("x has target.rows() columns");
            RegressionPair { input: x, target: y }
        })
        .collect()
}

/// Multi-token pairs labelled by a teacher layer.
pub fn teacher_task(teacher: &ToyAttentionLayer, seq_len: usize, samples: usize, seed: u64) -> Vec<RegressionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = teacher.model_dim();
    (0..samples)
        .map(|_| {
            let x = WeightMatrix::random_normal(seq_len, d, 1.0, &mut rng);
            let y = forward(teacher, &x).expect("input matches teacher dimension");
            RegressionPair { input: x, target: y }
        })
        .collect()
}

fn unit(v: WeightMatrix) -> WeightMatrix {
    let norm = v.sum_squares().sqrt();
    v.scale(1.0 / norm)
}

/// Named toy tasks used by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    /// Fit `W0 + P` where `P` is a dense (full-rank) perturbation.
    FullRank,
    /// Fit `W0 + √d·u·vᵀ` with unit vectors `u`, `v`, so the perturbation
    /// has the same Frobenius norm as the expected full-rank one.
    RankOne,
    /// Match a randomly drawn teacher attention layer on 4-token sequences.
    Teacher,
}

/// Starting layer and training data for a toy task.
pub fn build_task(task: ToyTask, dim: usize, samples: usize, seed: u64) -> (ToyAttentionLayer, Vec<RegressionPair>) {
    let base = ToyAttentionLayer::random(dim, dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a51);
    let w0 = base.value().effective();
    let data = match task {
        ToyTask::FullRank => {
            let p = WeightMatrix::random_normal(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
            linear_map_task(&w0.add(&p).expect("same shape"), samples, seed.wrapping_add(1))
        }
        ToyTask::RankOne => {
            let u = unit(WeightMatrix::random_normal(dim, 1, 1.0, &mut rng));
            let v = unit(WeightMatrix::random_normal(dim, 1, 1.0, &mut rng));
            let p = u.matmul_transposed(&v).expect("rank-one product").scale((dim as f64).sqrt());
            let target = w0.add(&p).expect("same shape");
            linear_map_task(&target, samples, seed.wrapping_add(1))
        }
        ToyTask::Teacher => {
            let teacher = ToyAttentionLayer::random(dim, dim, seed.wrapping_add(1000));
            teacher_task(&teacher, 4, samples, seed.wrapping_add(1))
        }
    };
    (base, data)
}
