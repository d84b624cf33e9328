mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{forward_oracle, live_lora_layer, max_gradient_error, tail_singular_value};
use solaudit_core::finetune::tasks::{build_task, linear_map_task, teacher_task, ToyTask};
use solaudit_core::finetune::{
    fft_step, forward, lora_delta, lora_init, lora_merge, mse_loss, train, FinetuneError, Mode,
    Projection, RegressionPair, ToyAttentionLayer, TrainConfig, WeightMatrix,
};

fn gradient_data(d: usize, k: usize, seed: u64) -> Vec<RegressionPair> {
    let teacher = ToyAttentionLayer::random(d, k, seed + 500);
    teacher_task(&teacher, 4, 3, seed + 900)
}

#[test]
fn forward_matches_loop_oracle() {
    for seed in 0..20 {
        let (d, k, n) = (3 + seed as usize % 4, 2 + seed as usize % 3, 1 + seed as usize % 5);
        let layer = ToyAttentionLayer::random(d, k, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = WeightMatrix::random_normal(n, d, 1.0, &mut rng);
        let out = forward(&layer, &x).unwrap();
        let [wq, wk, wv] = layer.effective_weights();
        let expected = forward_oracle(&wq, &wk, &wv, &x);
        for (t, row) in expected.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert!((out.get(t, j) - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_fft() {
    for seed in 0..5 {
        let layer = ToyAttentionLayer::random(4, 3, seed);
        let (err, _) = max_gradient_error(&layer, &gradient_data(4, 3, seed), 1e-5, 1e-6);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn gradients_match_finite_differences_lora() {
    for seed in 0..5 {
        let layer = live_lora_layer(4, 3, 2, seed);
        let (err, _) = max_gradient_error(&layer, &gradient_data(4, 3, seed), 1e-5, 1e-6);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn lora_at_init_reproduces_base_outputs() {
    for seed in 0..10 {
        let base = ToyAttentionLayer::random(6, 5, seed);
        let adapted = base.with_lora(2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = WeightMatrix::random_normal(3, 6, 1.0, &mut rng);
        assert_eq!(forward(&base, &x).unwrap(), forward(&adapted, &x).unwrap());
    }
}

#[test]
fn lora_merge_matches_accumulated_updates() {
    // Train with LoRA, then rebuild the merged weights from the base plus the
    // sum of every per-step ΔW increment.
    let (base, data) = build_task(ToyTask::FullRank, 5, 16, 3);
    let mut layer = base.with_lora(2, 3).unwrap();
    let mut increments = WeightMatrix::zeros(5, 5);
    for _ in 0..25 {
        let before = match layer.value() {
            Projection::Lora(ad) => lora_delta(ad),
            _ => unreachable!(),
        };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            steps: 1,
            seed: 0,
            mode: Mode::Lora,
            rank: Some(2),
        };
        layer = train(&layer, &data, &cfg).unwrap().layer;
        let after = match layer.value() {
            Projection::Lora(ad) => lora_delta(ad),
            _ => unreachable!(),
        };
        increments = increments.add(&after.sub(&before).unwrap()).unwrap();
    }
    let Projection::Lora(ad) = layer.value() else { unreachable!() };
    let rebuilt = base.value().effective().add(&increments).unwrap();
    assert!(lora_merge(ad).unwrap().max_abs_diff(&rebuilt).unwrap() < 1e-12);
    assert_eq!(ad.base(), &base.value().effective());
}

#[test]
fn scalar_quadratic_descent_matches_closed_form() {
    // L(w) = (w − c)², w_t = c + (w0 − c)(1 − 2β)^t
    let (c, w0, beta) = (1.5, -0.5, 0.1);
    let mut w = WeightMatrix::from_rows(&[vec![w0]]).unwrap();
    for t in 1..=50 {
        let grad = WeightMatrix::from_rows(&[vec![2.0 * (w.get(0, 0) - c)]]).unwrap();
        w = fft_step(&w, &grad, beta).unwrap();
        let closed = c + (w0 - c) * (1.0 - 2.0 * beta).powi(t);
        assert!((w.get(0, 0) - closed).abs() < 1e-12);
    }
}

#[test]
fn single_token_layer_reduces_to_value_projection() {
    let layer = ToyAttentionLayer::random(4, 4, 9);
    let target = WeightMatrix::random_normal(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for pair in linear_map_task(&target, 5, 2) {
        let expected = pair.input.matmul(&layer.value().effective()).unwrap();
        assert!(forward(&layer, &pair.input).unwrap().max_abs_diff(&expected).unwrap() < 1e-14);
    }
}

#[test]
fn lora_rank_stays_bounded_during_training() {
    let (base, data) = build_task(ToyTask::FullRank, 6, 16, 11);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        steps: 200,
        seed: 11,
        mode: Mode::Lora,
        rank: Some(2),
    };
    let trained = train(&base, &data, &cfg).unwrap().layer;
    for p in trained.projections() {
        let Projection::Lora(ad) = p else { unreachable!() };
        assert!(tail_singular_value(&lora_delta(ad), 2) < 1e-9);
    }
}

#[test]
fn fft_mode_rejects_adapted_layer() {
    let layer = ToyAttentionLayer::random(4, 4, 0).with_lora(1, 0).unwrap();
    let data = linear_map_task(&WeightMatrix::identity(4), 4, 0);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        steps: 1,
        seed: 0,
        mode: Mode::Fft,
        rank: None,
    };
    assert!(matches!(train(&layer, &data, &cfg), Err(FinetuneError::ModeMismatch(_))));
}

#[test]
fn rank_bounds_enforced() {
    assert!(lora_init(4, 4, 4, 0, WeightMatrix::zeros(4, 4)).is_err());
    assert!(lora_init(4, 4, 0, 0, WeightMatrix::zeros(4, 4)).is_err());
    assert!(lora_init(4, 6, 3, 0, WeightMatrix::zeros(4, 6)).is_ok());
}

#[test]
fn training_is_deterministic() {
    let (base, data) = build_task(ToyTask::Teacher, 4, 8, 5);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        steps: 30,
        seed: 5,
        mode: Mode::Lora,
        rank: Some(1),
    };
    assert_eq!(train(&base, &data, &cfg).unwrap(), train(&base, &data, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_trace_never_increases_on_convex_task(seed in 0u64..1000, dim in 2usize..6) {
        let (base, data) = build_task(ToyTask::FullRank, dim, 12, seed);
        let cfg = TrainConfig { learning_rate: 0.05, steps: 40, seed, mode: Mode::Fft, rank: None };
        let trace = train(&base, &data, &cfg).unwrap().loss_trace;
        prop_assert_eq!(trace.len(), 41);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn fft_step_leaves_inputs_untouched(seed in 0u64..1000, lr in 0.001f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightMatrix::random_normal(3, 4, 1.0, &mut rng);
        let g = WeightMatrix::random_normal(3, 4, 1.0, &mut rng);
        let (w0, g0) = (w.clone(), g.clone());
        let out = fft_step(&w, &g, lr).unwrap();
        prop_assert_eq!(&w, &w0);
        prop_assert_eq!(&g, &g0);
        for i in 0..3 {
            for j in 0..4 {
                prop_assert!((out.get(i, j) - (w.get(i, j) - lr * g.get(i, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_is_zero_on_own_outputs(seed in 0u64..1000) {
        let layer = ToyAttentionLayer::random(3, 3, seed);
        let data = teacher_task(&layer, 3, 4, seed);
        prop_assert!(mse_loss(&layer, &data).unwrap() < 1e-28);
    }
}
