//! Fine-tune, expert training and gating-only training.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, OptimHyper, OptimizerKind, TrainState};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    denoise_loss, draw_samples, loss_and_grads, Dataset, DenoiserNet, HiddenLayer, NoiseSchedule,
    NoisedSample, Split, TrainScope, Weighting,
};
use crate::error::{MoleError, Result};
use crate::lora::{ExpertKind, LowRankExpert};
use crate::mole::MoLELayer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Stage2Face,
    Stage2Hand,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Stage1,
        Stage::Stage2Face,
        Stage::Stage2Hand,
        Stage::Stage3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2Face => "stage2-face",
            Stage::Stage2Hand => "stage2-hand",
            Stage::Stage3 => "stage3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn expert(self) -> Option<ExpertKind> {
        match self {
            Stage::Stage2Face => Some(ExpertKind::Face),
            Stage::Stage2Hand => Some(ExpertKind::Hand),
            _ => None,
        }
    }

    pub fn for_expert(kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::Face => Stage::Stage2Face,
            ExpertKind::Hand => Stage::Stage2Hand,
        }
    }

    fn code(self) -> f64 {
        match self {
            Stage::Stage1 => 1.0,
            Stage::Stage2Face | Stage::Stage2Hand => 2.0,
            Stage::Stage3 => 3.0,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which training images a stage draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSelector {
    Scenes,
    FaceCloseups,
    HandCloseups,
    /// Scenes plus both close-up sets.
    Full,
}

impl DatasetSelector {
    pub fn splits(self) -> &'static [Split] {
        match self {
            DatasetSelector::Scenes => &[Split::SceneTrain],
            DatasetSelector::FaceCloseups => &[Split::FaceTrain],
            DatasetSelector::HandCloseups => &[Split::HandTrain],
            DatasetSelector::Full => &[Split::SceneTrain, Split::FaceTrain, Split::HandTrain],
        }
    }

    pub fn closeups_for(kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::Face => DatasetSelector::FaceCloseups,
            ExpertKind::Hand => DatasetSelector::HandCloseups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// `None` uses the optimizer's default.
    pub weight_decay: Option<f64>,
    pub weighting: Weighting,
    pub seed: u64,
    pub dataset: DatasetSelector,
    /// Expert rank; only read by expert stages.
    pub rank: usize,
    pub preset: Option<String>,
    /// Full-scale presets are kept for the record and refuse to run.
    pub runnable: bool,
}

pub const PAPER_PRESETS: [&str; 4] = [
    "paper-stage1",
    "paper-stage2-face",
    "paper-stage2-hand",
    "paper-stage3",
];

impl StageConfig {
    /// Desk-scale defaults for `stage`.
    pub fn desk(stage: Stage) -> Self {
        let (steps, lr, dataset, seed) = match stage {
            Stage::Stage1 => (500, 2e-3, DatasetSelector::Scenes, 11),
            Stage::Stage2Face => (300, 5e-3, DatasetSelector::FaceCloseups, 22),
            Stage::Stage2Hand => (300, 3e-3, DatasetSelector::HandCloseups, 33),
            Stage::Stage3 => (400, 3e-2, DatasetSelector::Full, 44),
        };
        Self {
            stage,
            steps,
            batch_size: 32,
            learning_rate: lr,
            optimizer: OptimizerKind::Adamw,
            weight_decay: None,
            weighting: Weighting::default(),
            seed,
            dataset,
            rank: 4,
            preset: None,
            runnable: true,
        }
    }

    /// The published full-scale regime under its preset name.
    pub fn paper(name: &str) -> Option<Self> {
        let (stage, steps, lr, optimizer, rank) = match name {
            "paper-stage1" => (Stage::Stage1, 300_000, 2e-6, OptimizerKind::Lion, 4),
            "paper-stage2-face" => (Stage::Stage2Face, 30_000, 2e-5, OptimizerKind::Adamw, 256),
            "paper-stage2-hand" => (Stage::Stage2Hand, 60_000, 1e-5, OptimizerKind::Adamw, 256),
            "paper-stage3" => (Stage::Stage3, 50_000, 1e-5, OptimizerKind::Adamw, 256),
            _ => return None,
        };
        Some(Self {
            steps,
            batch_size: 64,
            learning_rate: lr,
            optimizer,
            rank,
            preset: Some(name.to_string()),
            runnable: false,
            ..Self::desk(stage)
        })
    }

    pub fn hyper(&self) -> OptimHyper {
        let mut h = OptimHyper::defaults(self.optimizer);
        if let Some(wd) = self.weight_decay {
            h.weight_decay = wd;
        }
        h
    }

    /// `prefix` is the config path used in messages, e.g. `stage.stage1`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let fail =
            |field: &str, msg: String| Err(MoleError::Config(format!("{prefix}.{field}: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            );
        }
        if let Some(wd) = self.weight_decay {
            if !(wd >= 0.0 && wd.is_finite()) {
                return fail("weight_decay", format!("must be non-negative, got {wd}"));
            }
        }
        if self.rank == 0 {
            return fail("rank", "must be positive".into());
        }
        if let Err(MoleError::Config(m)) = self.weighting.validate() {
            return fail("weighting", m);
        }
        match self.stage.expert() {
            Some(kind) if self.dataset != DatasetSelector::closeups_for(kind) => fail(
                "dataset",
                format!(
                    "the {kind} expert must train on {:?} close-ups, got {:?}",
                    kind.name(),
                    self.dataset
                ),
            ),
            _ => Ok(()),
        }
    }

    fn check_runnable(&self) -> Result<()> {
        if !self.runnable {
            return Err(MoleError::Config(format!(
                "preset {} records the full-scale regime and is not runnable here",
                self.preset.as_deref().unwrap_or("?")
            )));
        }
        Ok(())
    }
}

/// One trained expert per wrapped layer, tied to the base it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    pub kind: ExpertKind,
    pub layers: Vec<(usize, LowRankExpert<f32>)>,
    pub base_fingerprint: u64,
}

impl ExpertSet {
    /// Collects the `kind` experts of an adapted network, frozen.
    pub fn from_adapted(
        net: &DenoiserNet<f32>,
        kind: ExpertKind,
        base_fingerprint: u64,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, l) in net.hidden.iter().enumerate() {
            if let HiddenLayer::Adapted {
                kind: k, expert, ..
            } = l
            {
                if *k == kind {
                    let mut e = expert.clone();
                    e.set_trainable(false);
                    layers.push((i, e));
                }
            }
        }
        if layers.is_empty() {
            return Err(MoleError::Contract(format!(
                "network carries no {kind} expert"
            )));
        }
        Ok(Self {
            kind,
            layers,
            base_fingerprint,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_scalar("meta.stage", Stage::for_expert(self.kind).code())?;
        ck.put_scalar("meta.expert", self.kind.index() as f64)?;
        ck.put_u64("meta.base_fingerprint", self.base_fingerprint)?;
        for (i, e) in &self.layers {
            let p = format!("layer.{i}.expert.{}", self.kind);
            ck.insert(format!("{p}.a"), &e.a)?;
            ck.insert(format!("{p}.b"), &e.b)?;
            ck.put_scalar(format!("{p}.scale"), e.scale())?;
            ck.put_scalar(format!("{p}.rank"), e.rank() as f64)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let code = ck.get_scalar("meta.expert")?;
        let kind = ExpertKind::ALL
            .into_iter()
            .find(|k| k.index() as f64 == code)
            .ok_or_else(|| MoleError::Malformed(format!("meta.expert = {code} names no expert")))?;
        let base_fingerprint = ck.get_u64("meta.base_fingerprint")?;
        let mut layers = Vec::new();
        for name in ck.names() {
            let Some(rest) = name.strip_prefix("layer.") else {
                continue;
            };
            let Some((idx, tail)) = rest.split_once('.') else {
                continue;
            };
            if tail != format!("expert.{kind}.a") {
                continue;
            }
            let i: usize = idx
                .parse()
                .map_err(|_| MoleError::Malformed(format!("bad layer index in {name}")))?;
            let p = format!("layer.{i}.expert.{kind}");
            let e = LowRankExpert::from_parts(
                ck.get(&format!("{p}.a"))?,
                ck.get(&format!("{p}.b"))?,
                ck.get_scalar(&format!("{p}.scale"))?,
            )?;
            if ck.get_scalar(&format!("{p}.rank"))? != e.rank() as f64 {
                return Err(MoleError::Malformed(format!(
                    "{p}.rank disagrees with factor shapes"
                )));
            }
            layers.push((i, e));
        }
        if layers.is_empty() {
            return Err(MoleError::Malformed(format!(
                "no {kind} expert tensors found"
            )));
        }
        layers.sort_by_key(|(i, _)| *i);
        Ok(Self {
            kind,
            layers,
            base_fingerprint,
        })
    }
}

/// Fixed-noise evaluation batch over `images`, reproducible from `seed`.
pub fn eval_batch(
    images: &[&Tensor<f32>],
    sched: &NoiseSchedule,
    seed: u64,
) -> Vec<NoisedSample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_samples(images, sched, &mut rng)
}

pub fn eval_loss(
    net: &DenoiserNet<f32>,
    batch: &[NoisedSample<f32>],
    sched: &NoiseSchedule,
    weighting: Weighting,
) -> Result<f64> {
    denoise_loss(net, batch, sched, weighting)
}

/// The shared inner loop: sample a batch with replacement, take gradients of
/// the weighted loss, apply one optimizer step.
fn train_loop(
    net: &mut DenoiserNet<f32>,
    images: &[&Tensor<f32>],
    sched: &NoiseSchedule,
    cfg: &StageConfig,
) -> Result<TrainState> {
    if images.is_empty() {
        return Err(MoleError::EmptyInput { op: "train" });
    }
    let mut state = TrainState::new(cfg.optimizer, cfg.hyper());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let picks: Vec<&Tensor<f32>> = (0..cfg.batch_size)
            .map(|_| images[rng.gen_range(0..images.len())])
            .collect();
        let batch = draw_samples(&picks, sched, &mut rng);
        let (loss, grads) = loss_and_grads(net, &batch, sched, cfg.weighting)?;
        if !loss.is_finite() {
            return Err(MoleError::Numeric(format!(
                "{} loss became {loss} at step {}",
                cfg.stage, state.step
            )));
        }
        let mut attach_err = None;
        net.for_each_param_mut(|name, t| {
            t.zero_grad();
            if let (true, Some(g)) = (t.requires_grad(), grads.get(name)) {
                if let Err(e) = t.set_grad(g.to_vec()) {
                    attach_err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = attach_err {
            return Err(e);
        }
        optimizer_step(&mut state, net, cfg.learning_rate)?;
        state.loss_history.push(loss);
    }
    net.zero_grads();
    Ok(state)
}

fn check_stage(cfg: &StageConfig, want: Stage) -> Result<()> {
    if cfg.stage != want {
        return Err(MoleError::Config(format!(
            "expected a {want} config, got {}",
            cfg.stage
        )));
    }
    cfg.validate(&format!("stage.{}", want.name().replace('-', "_")))?;
    cfg.check_runnable()
}

/// Full fine-tune of a plain network.
pub fn stage1_finetune(
    net: &mut DenoiserNet<f32>,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &StageConfig,
) -> Result<TrainState> {
    check_stage(cfg, Stage::Stage1)?;
    if !net.is_plain() {
        return Err(MoleError::Contract(
            "stage 1 fine-tunes a plain network; this one already carries experts".into(),
        ));
    }
    net.set_trainable(TrainScope::All);
    let state = train_loop(net, &data.images(cfg.dataset.splits()), sched, cfg);
    net.set_trainable(TrainScope::Nothing);
    state
}

/// Attaches one fresh expert to each layer in `layers`, additively.
pub fn attach_fresh_experts(
    base: &DenoiserNet<f32>,
    kind: ExpertKind,
    layers: &[usize],
    rank: usize,
    seed: u64,
) -> Result<DenoiserNet<f32>> {
    if !base.is_plain() {
        return Err(MoleError::Contract(
            "experts attach to a plain stage-1 network".into(),
        ));
    }
    check_layers(base, layers)?;
    let mut net = base.clone();
    for &i in layers {
        let HiddenLayer::Plain(b) = net.hidden[i].clone() else {
            unreachable!("plain checked")
        };
        let expert = LowRankExpert::init(
            b.d_in(),
            b.d_out(),
            rank,
            1.0,
            seed ^ ((i as u64 + 1) << 40) ^ ((kind.index() as u64 + 1) << 48),
        )?;
        net.hidden[i] = HiddenLayer::Adapted {
            base: b,
            kind,
            expert,
        };
    }
    Ok(net)
}

fn check_layers(net: &DenoiserNet<f32>, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(MoleError::Config(
            "stage.wrap_layers must name at least one layer".into(),
        ));
    }
    let n = net.hidden.len();
    for (k, &i) in layers.iter().enumerate() {
        if i >= n || layers[..k].contains(&i) {
            return Err(MoleError::Config(format!(
                "stage.wrap_layers: {i} is out of range or repeated (network has {n} hidden layers)"
            )));
        }
    }
    Ok(())
}

/// Trains one expert on its close-up set with everything else frozen.
pub fn stage2_train_expert(
    base: &DenoiserNet<f32>,
    kind: ExpertKind,
    layers: &[usize],
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &StageConfig,
) -> Result<(ExpertSet, TrainState)> {
    check_stage(cfg, Stage::for_expert(kind))?;
    let mut net = attach_fresh_experts(base, kind, layers, cfg.rank, cfg.seed)?;
    let state = train_attached_expert(&mut net, kind, data, sched, cfg)?;
    let set = ExpertSet::from_adapted(&net, kind, base.base_fingerprint())?;
    Ok((set, state))
}

/// The training half of stage 2, on a network whose adapted layers all carry
/// a `kind` expert. Only expert factors move.
pub fn train_attached_expert(
    net: &mut DenoiserNet<f32>,
    kind: ExpertKind,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &StageConfig,
) -> Result<TrainState> {
    check_stage(cfg, Stage::for_expert(kind))?;
    let mut adapted = 0;
    for (i, l) in net.hidden.iter().enumerate() {
        match l {
            HiddenLayer::Adapted { kind: k, .. } if *k == kind => adapted += 1,
            HiddenLayer::Plain(_) => {}
            _ => {
                return Err(MoleError::Contract(format!(
                    "layer {i} does not carry a lone {kind} expert"
                )))
            }
        }
    }
    if adapted == 0 {
        return Err(MoleError::Contract(format!("no {kind} expert attached")));
    }
    net.set_trainable(TrainScope::Experts);
    let state = train_loop(net, &data.images(cfg.dataset.splits()), sched, cfg);
    net.set_trainable(TrainScope::Nothing);
    state
}

/// Wraps the stage-1 network's layers with both experts and fresh gates.
pub fn assemble_mole(
    base: &DenoiserNet<f32>,
    face: Option<&ExpertSet>,
    hand: Option<&ExpertSet>,
) -> Result<DenoiserNet<f32>> {
    let face =
        face.ok_or_else(|| MoleError::Contract("missing face expert (stage2-face)".into()))?;
    let hand =
        hand.ok_or_else(|| MoleError::Contract("missing hand expert (stage2-hand)".into()))?;
    if !base.is_plain() {
        return Err(MoleError::Contract(
            "gating wraps a plain stage-1 network".into(),
        ));
    }
    let fp = base.base_fingerprint();
    for set in [face, hand] {
        if set.base_fingerprint != fp {
            return Err(MoleError::Contract(format!(
                "{} expert was trained on base {:016x}, but this base is {fp:016x}",
                set.kind, set.base_fingerprint
            )));
        }
    }
    if face.kind != ExpertKind::Face || hand.kind != ExpertKind::Hand {
        return Err(MoleError::Contract(
            "expert slots swapped: need (face, hand)".into(),
        ));
    }
    let face_layers: Vec<usize> = face.layers.iter().map(|(i, _)| *i).collect();
    let hand_layers: Vec<usize> = hand.layers.iter().map(|(i, _)| *i).collect();
    if face_layers != hand_layers {
        return Err(MoleError::Contract(format!(
            "experts cover different layers: face {face_layers:?}, hand {hand_layers:?}"
        )));
    }
    check_layers(base, &face_layers)?;
    let mut net = base.clone();
    for ((i, fe), (_, he)) in face.layers.iter().zip(&hand.layers) {
        let b = net.hidden[*i].base().clone();
        net.hidden[*i] = HiddenLayer::Mole(MoLELayer::wrap(b, vec![fe.clone(), he.clone()])?);
    }
    net.set_trainable(TrainScope::Nothing);
    Ok(net)
}

/// Trains only the gates of an assembled network.
pub fn stage3_train_gating(
    net: &mut DenoiserNet<f32>,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &StageConfig,
) -> Result<TrainState> {
    check_stage(cfg, Stage::Stage3)?;
    if net.mole_layer_count() == 0 {
        return Err(MoleError::Contract(
            "gating training needs gated layers; none present".into(),
        ));
    }
    for (i, l) in net.hidden.iter().enumerate() {
        match l {
            HiddenLayer::Mole(m) if m.e() != 2 => {
                return Err(MoleError::Contract(format!(
                    "layer {i} has {} experts; both face and hand are required",
                    m.e()
                )))
            }
            HiddenLayer::Adapted { .. } => {
                return Err(MoleError::Contract(format!(
                    "layer {i} carries a single expert; both face and hand are required"
                )))
            }
            _ => {}
        }
    }
    net.set_trainable(TrainScope::Gates);
    let state = train_loop(net, &data.images(cfg.dataset.splits()), sched, cfg);
    net.set_trainable(TrainScope::Nothing);
    state
}

/// Full gated-network checkpoint with lineage metadata.
pub fn stage3_checkpoint(net: &DenoiserNet<f32>) -> Result<Checkpoint> {
    let mut ck = net.to_checkpoint();
    ck.put_scalar("meta.stage", Stage::Stage3.code())?;
    ck.put_u64("meta.base_fingerprint", net.base_fingerprint())?;
    Ok(ck)
}

pub fn stage1_checkpoint(net: &DenoiserNet<f32>) -> Result<Checkpoint> {
    let mut ck = net.to_checkpoint();
    ck.put_scalar("meta.stage", Stage::Stage1.code())?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DataConfig, NetConfig};

    fn small() -> (DenoiserNet<f32>, Dataset, NoiseSchedule) {
        let cfg = NetConfig {
            hidden_width: 16,
            hidden_layers: 2,
            ..NetConfig::default()
        };
        let net = DenoiserNet::init(cfg, 1).unwrap();
        let data = Dataset::generate(
            &DataConfig {
                seed: 1,
                scenes: 4,
                face_closeups: 4,
                hand_closeups: 4,
                heldout: 2,
            },
            16,
        )
        .unwrap();
        (net, data, NoiseSchedule::linear(20, 1e-4, 0.2).unwrap())
    }

    fn quick(stage: Stage) -> StageConfig {
        StageConfig {
            steps: 3,
            batch_size: 2,
            rank: 2,
            ..StageConfig::desk(stage)
        }
    }

    #[test]
    fn zero_step_stage1_is_identity() {
        let (mut net, data, sched) = small();
        let before = net.to_checkpoint().to_bytes();
        let cfg = StageConfig {
            steps: 0,
            ..quick(Stage::Stage1)
        };
        stage1_finetune(&mut net, &data, &sched, &cfg).unwrap();
        assert_eq!(net.to_checkpoint().to_bytes(), before);
    }

    #[test]
    fn paper_presets_are_recorded_but_not_runnable() {
        let p = StageConfig::paper("paper-stage1").unwrap();
        assert_eq!(
            (p.learning_rate, p.batch_size, p.optimizer),
            (2e-6, 64, OptimizerKind::Lion)
        );
        assert_eq!(p.steps, 300_000);
        let f = StageConfig::paper("paper-stage2-face").unwrap();
        assert_eq!((f.rank, f.learning_rate, f.steps), (256, 2e-5, 30_000));
        let h = StageConfig::paper("paper-stage2-hand").unwrap();
        assert_eq!((h.rank, h.learning_rate, h.steps), (256, 1e-5, 60_000));
        let g = StageConfig::paper("paper-stage3").unwrap();
        assert_eq!((g.learning_rate, g.steps), (1e-5, 50_000));
        let (mut net, data, sched) = small();
        assert!(stage1_finetune(&mut net, &data, &sched, &p).is_err());
    }

    #[test]
    fn wrong_dataset_for_expert_is_config_error() {
        let (net, data, sched) = small();
        let cfg = StageConfig {
            dataset: DatasetSelector::HandCloseups,
            ..quick(Stage::Stage2Face)
        };
        let err =
            stage2_train_expert(&net, ExpertKind::Face, &[0], &data, &sched, &cfg).unwrap_err();
        assert!(matches!(err, MoleError::Config(_)), "{err}");
    }

    #[test]
    fn stage1_rejects_wrapped_net() {
        let (net, data, sched) = small();
        let mut adapted = attach_fresh_experts(&net, ExpertKind::Face, &[0], 2, 0).unwrap();
        let err = stage1_finetune(&mut adapted, &data, &sched, &quick(Stage::Stage1)).unwrap_err();
        assert!(matches!(err, MoleError::Contract(_)));
    }

    #[test]
    fn expert_set_round_trip_and_lineage() {
        let (net, data, sched) = small();
        let (face, _) = stage2_train_expert(
            &net,
            ExpertKind::Face,
            &[0, 1],
            &data,
            &sched,
            &quick(Stage::Stage2Face),
        )
        .unwrap();
        let ck = face.to_checkpoint().unwrap();
        assert_eq!(ExpertSet::from_checkpoint(&ck).unwrap(), face);
        let (hand, _) = stage2_train_expert(
            &net,
            ExpertKind::Hand,
            &[0, 1],
            &data,
            &sched,
            &quick(Stage::Stage2Hand),
        )
        .unwrap();
        assert!(assemble_mole(&net, Some(&face), None)
            .unwrap_err()
            .to_string()
            .contains("hand expert"));
        let other = DenoiserNet::<f32>::init(*net.config(), 99).unwrap();
        assert!(assemble_mole(&other, Some(&face), Some(&hand)).is_err());
        let mole = assemble_mole(&net, Some(&face), Some(&hand)).unwrap();
        assert_eq!(mole.mole_layer_count(), 2);
        assert_eq!(mole.base_fingerprint(), net.base_fingerprint());
    }

    #[test]
    fn stage3_needs_gated_layers() {
        let (mut net, data, sched) = small();
        assert!(stage3_train_gating(&mut net, &data, &sched, &quick(Stage::Stage3)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (net, data, sched) = small();
        let run = || {
            let mut n = net.clone();
            stage1_finetune(&mut n, &data, &sched, &quick(Stage::Stage1)).unwrap();
            n.to_checkpoint().to_bytes()
        };
        assert_eq!(run(), run());
    }
}
