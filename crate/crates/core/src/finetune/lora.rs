use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FinetuneError, WeightMatrix};

/// Frozen base weight `W0` (d×k) plus trainable factors `A` (d×r) and
/// `B` (k×r). The effective weight is `W0 + A·Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    base: WeightMatrix,
    a: WeightMatrix,
    b: WeightMatrix,
}

impl LoraAdapter {
    /// Assembles an adapter from explicit parts, checking shapes and rank.
    pub fn from_parts(base: WeightMatrix, a: WeightMatrix, b: WeightMatrix) -> Result<Self, FinetuneError> {
        let (d, k) = base.shape();
        let r = a.cols();
        check_rank(d, k, r)?;
        if a.rows() != d || b.shape() != (k, r) {
            return Err(FinetuneError::Shape {
                op: "lora adapter",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(LoraAdapter { base, a, b })
    }

    pub fn base(&self) -> &WeightMatrix {
        &self.base
    }

    pub fn a(&self) -> &WeightMatrix {
        &self.a
    }

    pub fn b(&self) -> &WeightMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.base.cols()
    }

    /// `r·(d+k)`
    pub fn trainable_count(&self) -> usize {
        self.rank() * (self.input_dim() + self.output_dim())
    }

    /// Same base, new factors. The base matrix is moved over untouched.
    pub(crate) fn with_factors(&self, a: WeightMatrix, b: WeightMatrix) -> Self {
        debug_assert_eq!(a.shape(), self.a.shape());
        debug_assert_eq!(b.shape(), self.b.shape());
        LoraAdapter {
            base: self.base.clone(),
            a,
            b,
        }
    }
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<(), FinetuneError> {
    if r == 0 || r >= d.min(k) {
        return Err(FinetuneError::Rank { rank: r, d, k });
    }
    Ok(())
}

/// Creates an adapter over `base` with `A ~ N(0, 1/r)` and `B = 0`, so the
/// initial update `A·Bᵀ` is exactly zero.
pub fn lora_init(d: usize, k: usize, r: usize, seed: u64, base: WeightMatrix) -> Result<LoraAdapter, FinetuneError> {
    check_rank(d, k, r)?;
    if base.shape() != (d, k) {
        return Err(FinetuneError::Shape {
            op: "lora_init",
            left: (d, k),
            right: base.shape(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = WeightMatrix::random_normal(d, r, 1.0 / (r as f64).sqrt(), &mut rng);
    let b = WeightMatrix::zeros(k, r);
    Ok(LoraAdapter { base, a, b })
}

/// `ΔW = A·Bᵀ`, a d×k matrix of rank at most r.
pub fn lora_delta(adapter: &LoraAdapter) -> WeightMatrix {
    adapter
        .a
        .matmul_transposed(&adapter.b)
        .expect("adapter shapes are validated on construction")
}

/// `W0 + A·Bᵀ`
pub fn lora_merge(adapter: &LoraAdapter) -> Result<WeightMatrix, FinetuneError> {
    adapter.base.add(&lora_delta(adapter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_delta_is_exactly_zero() {
        for (d, k, r, seed) in [(4, 6, 2, 1), (8, 8, 1, 2), (16, 5, 4, 3)] {
            let ad = lora_init(d, k, r, seed, WeightMatrix::zeros(d, k)).unwrap();
            assert!(lora_delta(&ad).is_zero());
            assert_eq!(ad.trainable_count(), r * (d + k));
            assert!(!ad.a().is_zero());
        }
    }

    #[test]
    fn parameter_reduction_64() {
        let ad = lora_init(64, 64, 8, 0, WeightMatrix::zeros(64, 64)).unwrap();
        assert_eq!(ad.trainable_count(), 1024);
        assert_eq!(64 * 64 / ad.trainable_count(), 4);
    }

    #[test]
    fn rank_errors() {
        assert!(matches!(
            lora_init(4, 4, 4, 0, WeightMatrix::zeros(4, 4)),
            Err(FinetuneError::Rank { .. })
        ));
        assert!(lora_init(4, 4, 0, 0, WeightMatrix::zeros(4, 4)).is_err());
        assert!(lora_init(4, 6, 2, 0, WeightMatrix::zeros(6, 4)).is_err());
    }

    #[test]
    fn hand_delta_and_merge() {
        let base = WeightMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let a = WeightMatrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let b = WeightMatrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        // r=1 < min(2,2)
        let ad = LoraAdapter::from_parts(base.clone(), a, b).unwrap();
        assert_eq!(lora_delta(&ad).to_rows(), vec![vec![2.0, 3.0], vec![0.0, 0.0]]);
        let merged = lora_merge(&ad).unwrap();
        assert_eq!(merged.to_rows(), vec![vec![3.0, 4.0], vec![1.0, 1.0]]);
        assert_eq!(ad.base(), &base);
    }

    #[test]
    fn zero_adapter_merge_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = WeightMatrix::random_normal(5, 3, 1.0, &mut rng);
        let ad = lora_init(5, 3, 1, 9, base.clone()).unwrap();
        assert_eq!(lora_merge(&ad).unwrap(), base);
    }
}
