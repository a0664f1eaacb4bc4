//! Randomized invariants of the gated layer, the expert algebra and the
//! file formats.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{permute_rows, random_layer, rel_diff, shuffled};
use mole::checkpoint::Checkpoint;
use mole::diffusion::NoiseSchedule;
use mole::lora::LowRankExpert;
use mole::telemetry::heatmap_pgm;
use mole::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    d_in: usize,
    d_out: usize,
    rank: usize,
}

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..9, 3usize..10, 3usize..10, any::<u8>()).prop_map(|(n, d_in, d_out, r)| Dims {
        n,
        d_in,
        d_out,
        rank: 1 + r as usize % (d_in.min(d_out) - 1),
    })
}

fn pool(x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::inference();
    tape.mean_pool_tokens(&Var::constant(x.clone()))
        .unwrap()
        .into_value()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_ignores_token_order(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let p = shuffled(d.n, &mut rng);
        prop_assert!(pool(&x).max_abs_diff(&pool(&permute_rows(&x, &p))) <= 1e-12);
    }

    #[test]
    fn expert_is_linear_in_its_input(seed in any::<u64>(), d in dims(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 1.0);
        let e = &layer.experts[0];
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let y = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let mix = Tensor::from_fn([d.n, d.d_in], |k| a * x.data()[k] + b * y.data()[k]);
        let (ex, ey) = (e.apply(&x).unwrap(), e.apply(&y).unwrap());
        let want = Tensor::from_fn([d.n, d.d_out], |k| a * ex.data()[k] + b * ey.data()[k]);
        let got = e.apply(&mix).unwrap();
        prop_assert!(got.max_abs_diff(&want) <= 1e-10 * (1.0 + want.norm()));
    }

    #[test]
    fn scalar_moves_through_the_expert(seed in any::<u64>(), d in dims(), g in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 1.0);
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let s = Tensor::from_fn([d.n, 1], |_| rand::Rng::gen_range(&mut rng, 0.0..1.0));
        for i in 0..2 {
            let outside = layer.expert_branch(i, &x, &s, g).unwrap();
            let inner = Tensor::from_fn([d.n, d.d_in], |k| x.data()[k] * s.data()[k / d.d_in] * g);
            let inside = layer.experts[i].apply(&inner).unwrap();
            prop_assert!(rel_diff(&inside, &outside) <= 1e-10);
        }
    }

    #[test]
    fn tokens_permute_through_the_layer(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 1.0);
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let p = shuffled(d.n, &mut rng);
        let px = permute_rows(&x, &p);
        let (y, gates) = layer.forward_with_gates(&x).unwrap();
        let (py, pgates) = layer.forward_with_gates(&px).unwrap();
        prop_assert!(py.max_abs_diff(&permute_rows(&y, &p)) <= 1e-12 * (1.0 + y.norm()));
        prop_assert!(pgates.g.max_abs_diff(&gates.g) <= 1e-12);
        prop_assert!(pgates.s.max_abs_diff(&permute_rows(&gates.s, &p)) <= 1e-15);
    }

    #[test]
    fn gates_stay_inside_the_unit_interval(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 1.0);
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let gates = layer.gating(&x).unwrap();
        prop_assert!(gates.s.data().iter().chain(gates.g.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn strongly_negative_biases_switch_experts_off(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 0.3);
        layer.gates.phi_bias = Tensor::full([2], -30.0);
        layer.gates.omega_bias = Tensor::full([2], -30.0);
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let base = layer.base.forward(&x).unwrap();
        prop_assert!(rel_diff(&layer.forward(&x).unwrap(), &base) <= 1e-6);
    }

    #[test]
    fn merged_weight_matches_additive_path(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, d.d_in, d.d_out, d.rank, 1.0);
        let e = &layer.experts[1];
        let x = Tensor::randn([d.n, d.d_in], 1.0, &mut rng);
        let mut merged = layer.base.clone();
        merged.w = e.merge_into_base(&layer.base.w).unwrap();
        let via_merge = merged.forward(&x).unwrap();
        let base = layer.base.forward(&x).unwrap();
        let delta = e.apply(&x).unwrap();
        let additive = Tensor::from_fn(base.shape().to_vec(), |k| base.data()[k] + delta.data()[k]);
        prop_assert!(rel_diff(&via_merge, &additive) <= 1e-10);
    }

    #[test]
    fn update_rank_never_exceeds_r(seed in any::<u64>(), d in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = LowRankExpert::<f64>::from_parts(
            Tensor::randn([d.d_in, d.rank], 1.0, &mut rng),
            Tensor::randn([d.d_out, d.rank], 1.0, &mut rng),
            1.0,
        ).unwrap();
        prop_assert!(e.numerical_rank(1e-10) <= d.rank);
        let dw = e.delta_weight();
        prop_assert_eq!(dw.shape(), &[d.d_in, d.d_out]);
    }

    #[test]
    fn heatmap_bytes_follow_round_half_up(values in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let bytes = heatmap_pgm(&values, 1, values.len()).unwrap();
        let header = format!("P5\n{} 1\n255\n", values.len());
        prop_assert_eq!(&bytes[..header.len()], header.as_bytes());
        for (b, v) in bytes[header.len()..].iter().zip(&values) {
            prop_assert_eq!(*b as f64, (255.0 * v + 0.5).floor());
        }
    }

    #[test]
    fn checkpoints_round_trip_and_reject_any_flipped_byte(
        seed in any::<u64>(),
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 0..4),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new();
        for (k, shape) in shapes.iter().enumerate() {
            if k % 2 == 0 {
                ck.insert(format!("t{k}"), &Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng)).unwrap();
            } else {
                ck.insert(format!("t{k}"), &Tensor::<f32>::randn(shape.clone(), 1.0, &mut rng)).unwrap();
            }
        }
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(again.to_bytes(), bytes.clone());
        let mut bad = bytes.clone();
        let at = flip.index(bad.len());
        bad[at] ^= 0x5a;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn schedules_are_monotone(steps in 2usize..300, b0 in 1e-5f64..1e-2, span in 1e-3f64..0.3) {
        let s = NoiseSchedule::linear(steps, b0, b0 + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!((0..steps - 1).all(|t| s.snr(t + 1) < s.snr(t)));
    }
}
