#![allow(dead_code)]

use std::path::Path;

use rand::Rng;

use mole::config::RunConfig;
use mole::diffusion::{DataConfig, Dataset};
use mole::lora::LowRankExpert;
use mole::mole::{BaseLinear, GatingParams, MoLELayer};
use mole::pipeline::{Stage, StageConfig};
use mole::tensor::Tensor;

/// `‖a − b‖ / ‖b‖`, with an exact zero when both vanish.
pub fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let d: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if d == 0.0 {
        0.0
    } else {
        d / b.norm()
    }
}

/// A gated layer with non-trivial experts and gates of the given spread.
pub fn random_layer<R: Rng>(
    rng: &mut R,
    d_in: usize,
    d_out: usize,
    rank: usize,
    gate_std: f64,
) -> MoLELayer<f64> {
    let base = BaseLinear::init(d_in, d_out, rng);
    let experts = (0..2)
        .map(|_| {
            LowRankExpert::from_parts(
                Tensor::randn([d_in, rank], 1.0, rng),
                Tensor::randn([d_out, rank], 1.0, rng),
                rng.gen_range(0.5..2.0),
            )
            .unwrap()
        })
        .collect();
    let gates = GatingParams {
        phi: Tensor::randn([d_in, 2], gate_std, rng),
        phi_bias: Tensor::randn([2], gate_std, rng),
        omega: Tensor::randn([d_in, 2], gate_std, rng),
        omega_bias: Tensor::randn([2], gate_std, rng),
    };
    MoLELayer::from_parts(base, experts, gates).unwrap()
}

pub fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (n, d) = x.dims2("permute").unwrap();
    assert_eq!(perm.len(), n);
    Tensor::from_fn([n, d], |k| x.get2(perm[k / d], k % d))
}

pub fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn small_data_config() -> DataConfig {
    DataConfig {
        seed: 7,
        scenes: 24,
        face_closeups: 16,
        hand_closeups: 16,
        heldout: 8,
    }
}

pub fn small_data() -> Dataset {
    Dataset::generate(&small_data_config(), 16).unwrap()
}

pub fn short(stage: Stage, steps: usize) -> StageConfig {
    StageConfig {
        steps,
        batch_size: 8,
        ..StageConfig::desk(stage)
    }
}

/// Default model and schedule, a small dataset and a few steps per stage.
pub fn quick_run(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::with_out_dir(dir);
    cfg.data = small_data_config();
    cfg.stage.stage1 = short(Stage::Stage1, 20);
    cfg.stage.stage2_face = short(Stage::Stage2Face, 15);
    cfg.stage.stage2_hand = short(Stage::Stage2Hand, 15);
    cfg.stage.stage3 = short(Stage::Stage3, 15);
    cfg.analysis.runs = 2;
    cfg
}

/// The JSON form of [`quick_run`].
pub fn quick_run_json(dir: &Path) -> String {
    quick_run(dir).to_json()
}
