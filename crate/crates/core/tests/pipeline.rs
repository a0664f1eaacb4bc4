//! Training-stage contracts: what moves, what stays put, and what improves.

mod common;

use std::collections::BTreeSet;

use common::{quick_run, short, small_data};
use mole::diffusion::{DataConfig, Dataset, DenoiserNet, NetConfig, Split, Weighting};
use mole::lora::ExpertKind;
use mole::pipeline::{
    assemble_mole, attach_fresh_experts, eval_batch, eval_loss, stage1_finetune,
    stage2_train_expert, stage3_checkpoint, stage3_train_gating, train_attached_expert, ExpertSet,
    Stage, StageConfig,
};
use mole::workflow::run_pipeline;
use mole::MoleError;

fn changed(before: &DenoiserNet<f32>, after: &DenoiserNet<f32>) -> BTreeSet<String> {
    before
        .named_params()
        .into_iter()
        .zip(after.named_params())
        .filter(|((_, a), (_, b))| a.to_le_bytes() != b.to_le_bytes())
        .map(|((n, _), _)| n)
        .collect()
}

fn names_with(net: &DenoiserNet<f32>, needle: &str) -> BTreeSet<String> {
    net.named_params()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.contains(needle))
        .collect()
}

fn stage1_base(data: &Dataset, steps: usize) -> DenoiserNet<f32> {
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let mut net = DenoiserNet::init(NetConfig::default(), 0).unwrap();
    stage1_finetune(&mut net, data, &sched, &short(Stage::Stage1, steps)).unwrap();
    net
}

fn loss_on(net: &DenoiserNet<f32>, data: &Dataset, split: Split, seed: u64) -> f64 {
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let batch = eval_batch(&data.images(&[split]), &sched, seed);
    eval_loss(net, &batch, &sched, Weighting::default()).unwrap()
}

#[test]
fn two_hundred_steps_cut_the_loss_by_a_fifth() {
    let data = Dataset::generate(
        &DataConfig {
            scenes: 8,
            face_closeups: 1,
            hand_closeups: 1,
            heldout: 1,
            ..DataConfig::default()
        },
        16,
    )
    .unwrap();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let batch = eval_batch(&data.images(&[Split::SceneTrain]), &sched, 5);
    let mut net = DenoiserNet::init(NetConfig::default(), 3).unwrap();
    let before = eval_loss(&net, &batch, &sched, Weighting::default()).unwrap();
    stage1_finetune(&mut net, &data, &sched, &short(Stage::Stage1, 200)).unwrap();
    let after = eval_loss(&net, &batch, &sched, Weighting::default()).unwrap();
    assert!(after <= 0.8 * before, "{before} -> {after}");
}

#[test]
fn desk_stage1_cuts_the_loss_by_a_fifth() {
    let data = Dataset::generate(&DataConfig::default(), 16).unwrap();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let cfg = StageConfig::desk(Stage::Stage1);
    assert_eq!((cfg.steps, cfg.batch_size), (500, 32));
    let mut net = DenoiserNet::init(NetConfig::default(), 0).unwrap();
    let before = loss_on(&net, &data, Split::SceneTrain, 9);
    stage1_finetune(&mut net, &data, &sched, &cfg).unwrap();
    let after = loss_on(&net, &data, Split::SceneTrain, 9);
    assert!(after <= 0.8 * before, "{before} -> {after}");
}

#[test]
fn stage1_moves_every_parameter() {
    let data = small_data();
    let untrained = DenoiserNet::init(NetConfig::default(), 0).unwrap();
    let trained = stage1_base(&data, 5);
    let all: BTreeSet<String> = untrained
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(changed(&untrained, &trained), all);
}

#[test]
fn stage2_moves_only_its_expert() {
    let data = small_data();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let base = stage1_base(&data, 10);
    let layers = [0, 1, 2];
    let mut net = attach_fresh_experts(&base, ExpertKind::Hand, &layers, 4, 1).unwrap();
    let before = net.clone();
    let fp = net.base_fingerprint();
    train_attached_expert(
        &mut net,
        ExpertKind::Hand,
        &data,
        &sched,
        &short(Stage::Stage2Hand, 100),
    )
    .unwrap();
    assert_eq!(net.base_fingerprint(), fp);
    assert_eq!(
        net.base_checkpoint().to_bytes(),
        base.base_checkpoint().to_bytes()
    );
    assert_eq!(changed(&before, &net), names_with(&net, ".expert.hand."));
    assert!(net.trainable_names().is_empty());
}

#[test]
fn stage2_rejects_a_net_without_that_expert() {
    let data = small_data();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let base = stage1_base(&data, 1);
    let mut net = attach_fresh_experts(&base, ExpertKind::Face, &[1], 4, 1).unwrap();
    let err = train_attached_expert(
        &mut net,
        ExpertKind::Hand,
        &data,
        &sched,
        &short(Stage::Stage2Hand, 1),
    )
    .unwrap_err();
    assert!(matches!(err, MoleError::Contract(_)), "{err}");
    let mut plain = base.clone();
    assert!(train_attached_expert(
        &mut plain,
        ExpertKind::Face,
        &data,
        &sched,
        &short(Stage::Stage2Face, 1)
    )
    .is_err());
}

#[test]
fn stage3_moves_only_the_gates() {
    let data = small_data();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let base = stage1_base(&data, 10);
    let layers = [0, 1, 2];
    let (face, _) = stage2_train_expert(
        &base,
        ExpertKind::Face,
        &layers,
        &data,
        &sched,
        &short(Stage::Stage2Face, 10),
    )
    .unwrap();
    let (hand, _) = stage2_train_expert(
        &base,
        ExpertKind::Hand,
        &layers,
        &data,
        &sched,
        &short(Stage::Stage2Hand, 10),
    )
    .unwrap();
    let mut net = assemble_mole(&base, Some(&face), Some(&hand)).unwrap();
    let frozen = |n: &DenoiserNet<f32>| {
        n.to_checkpoint()
            .filtered(|name| !name.contains(".gates."))
            .fingerprint()
    };
    let before = net.clone();
    let fp = frozen(&net);
    stage3_train_gating(&mut net, &data, &sched, &short(Stage::Stage3, 100)).unwrap();
    assert_eq!(frozen(&net), fp);
    assert_eq!(changed(&before, &net), names_with(&net, ".gates."));
}

#[test]
fn stage3_refuses_mismatched_lineage() {
    let data = small_data();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let base = stage1_base(&data, 2);
    let other = stage1_base(&data, 3);
    let layers = [1];
    let (face, _) = stage2_train_expert(
        &base,
        ExpertKind::Face,
        &layers,
        &data,
        &sched,
        &short(Stage::Stage2Face, 2),
    )
    .unwrap();
    let (hand, _) = stage2_train_expert(
        &other,
        ExpertKind::Hand,
        &layers,
        &data,
        &sched,
        &short(Stage::Stage2Hand, 2),
    )
    .unwrap();
    let err = assemble_mole(&base, Some(&face), Some(&hand)).unwrap_err();
    assert!(
        err.to_string().contains("hand expert was trained on base"),
        "{err}"
    );
    let err = assemble_mole(&base, Some(&face), None).unwrap_err();
    assert!(err.to_string().contains("missing hand expert"), "{err}");
    let err = assemble_mole(&base, Some(&face), Some(&face)).unwrap_err();
    assert!(matches!(err, MoleError::Contract(_)));
}

#[test]
fn trained_expert_beats_the_bare_base_on_heldout_closeups() {
    let data = small_data();
    let sched = mole::config::ScheduleConfig::default().build().unwrap();
    let base = stage1_base(&data, 150);
    for (kind, stage, split) in [
        (ExpertKind::Face, Stage::Stage2Face, Split::FaceHeldout),
        (ExpertKind::Hand, Stage::Stage2Hand, Split::HandHeldout),
    ] {
        let mut net = attach_fresh_experts(&base, kind, &[0, 1, 2], 4, 5).unwrap();
        train_attached_expert(&mut net, kind, &data, &sched, &short(stage, 150)).unwrap();
        let with = loss_on(&net, &data, split, 77);
        let without = loss_on(&base, &data, split, 77);
        assert!(with < without, "{kind}: {with} vs base {without}");
    }
}

#[test]
fn expert_sets_collect_only_their_kind() {
    let data = small_data();
    let base = stage1_base(&data, 1);
    let net = attach_fresh_experts(&base, ExpertKind::Face, &[0, 2], 4, 1).unwrap();
    let set = ExpertSet::from_adapted(&net, ExpertKind::Face, base.base_fingerprint()).unwrap();
    assert_eq!(
        set.layers.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
        vec![0, 2]
    );
    assert!(ExpertSet::from_adapted(&net, ExpertKind::Hand, 0).is_err());
}

#[test]
fn the_whole_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path());
    let data = Dataset::generate(&cfg.data, cfg.model.image_size).unwrap();
    let a = run_pipeline(&cfg, &data).unwrap();
    let b = run_pipeline(&cfg, &data).unwrap();
    assert_eq!(
        stage3_checkpoint(&a.stage3).unwrap().to_bytes(),
        stage3_checkpoint(&b.stage3).unwrap().to_bytes()
    );
    assert_eq!(
        a.face.to_checkpoint().unwrap().to_bytes(),
        b.face.to_checkpoint().unwrap().to_bytes()
    );
    for ((_, sa), (_, sb)) in a.states.iter().zip(&b.states) {
        assert_eq!(sa.loss_history, sb.loss_history);
    }
}
