//! Run-directory level operations: stages read their prerequisites from and
//! write their outputs to `out_dir`.
//!
//! Layout:
//! ```text
//! <out_dir>/config.json
//! <out_dir>/data/{data.mole,manifest.json}
//! <out_dir>/<stage>.mole
//! <out_dir>/analysis/{gates,norms}/<group>.csv
//! <out_dir>/analysis/heatmaps/<group>.layer<i>.<expert>.pgm
//! ```

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, ScheduleConfig};
use crate::diffusion::{Dataset, DenoiserNet, NoiseSchedule, SampleStart, SceneKind, Split};
use crate::error::{MoleError, Result};
use crate::lora::ExpertKind;
use crate::pipeline::{
    assemble_mole, stage1_checkpoint, stage1_finetune, stage2_train_expert, stage3_checkpoint,
    stage3_train_gating, ExpertSet, Stage, TrainState,
};
use crate::telemetry::{
    collect_traces, expert_label, export_gate_csv, export_heatmap, export_norm_csv, GateTrace,
    NormTrace, SampleRun,
};
use crate::tensor::Tensor;

pub fn stage_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.mole", stage.name()))
}

pub fn data_dir(dir: &Path) -> PathBuf {
    dir.join("data")
}

/// The run's dataset: loaded from `<out_dir>/data` when present, otherwise
/// regenerated from the config (same seeds, same images).
pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = data_dir(&cfg.out_dir);
    if dir.join("manifest.json").exists() {
        let d = Dataset::load(&dir)?;
        if d.image_size != cfg.model.image_size {
            return Err(MoleError::Config(format!(
                "{}: images are {}px but model.image_size is {}",
                dir.display(),
                d.image_size,
                cfg.model.image_size
            )));
        }
        Ok(d)
    } else {
        Dataset::generate(&cfg.data, cfg.model.image_size)
    }
}

fn put_schedule(ck: &mut Checkpoint, s: &ScheduleConfig) -> Result<()> {
    let t = Tensor::<f64>::new([3], vec![s.steps as f64, s.beta_start, s.beta_end])?;
    ck.insert("meta.schedule", &t)
}

/// Schedule recorded in a checkpoint, or the default one.
pub fn schedule_of(ck: &Checkpoint) -> Result<NoiseSchedule> {
    if !ck.contains("meta.schedule") {
        return ScheduleConfig::default().build();
    }
    let v = ck.get::<f64>("meta.schedule")?;
    match v.data() {
        &[t, b0, b1] => ScheduleConfig {
            steps: t as usize,
            beta_start: b0,
            beta_end: b1,
        }
        .build(),
        _ => Err(MoleError::Malformed(
            "meta.schedule must hold 3 values".into(),
        )),
    }
}

fn load_required(path: &Path, what: &str, stage: Stage) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(MoleError::Contract(format!(
            "missing {what}: {} not found (run `train --stage {stage}` first)",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

pub fn load_stage1(dir: &Path) -> Result<DenoiserNet<f32>> {
    let ck = load_required(
        &stage_path(dir, Stage::Stage1),
        "stage-1 network",
        Stage::Stage1,
    )?;
    let net = DenoiserNet::from_checkpoint(&ck)?;
    if !net.is_plain() {
        return Err(MoleError::Contract(
            "stage1.mole holds a wrapped network".into(),
        ));
    }
    Ok(net)
}

pub fn load_expert(dir: &Path, kind: ExpertKind) -> Result<ExpertSet> {
    let stage = Stage::for_expert(kind);
    let what = format!("{kind} expert");
    let set = ExpertSet::from_checkpoint(&load_required(&stage_path(dir, stage), &what, stage)?)?;
    if set.kind != kind {
        return Err(MoleError::Contract(format!(
            "{} holds the {} expert, expected {kind}",
            stage_path(dir, stage).display(),
            set.kind
        )));
    }
    Ok(set)
}

pub fn load_stage3(dir: &Path) -> Result<DenoiserNet<f32>> {
    let ck = load_required(
        &stage_path(dir, Stage::Stage3),
        "gated network",
        Stage::Stage3,
    )?;
    DenoiserNet::from_checkpoint(&ck)
}

/// Runs one stage against the run directory and writes `<stage>.mole`.
pub fn train_stage(cfg: &RunConfig, stage: Stage, data: &Dataset) -> Result<(PathBuf, TrainState)> {
    let dir = &cfg.out_dir;
    let sched = cfg.schedule();
    let stage_cfg = cfg.stage.get(stage);
    let (mut ck, state) = match stage {
        Stage::Stage1 => {
            let mut net = DenoiserNet::init(cfg.model, cfg.stage.init_seed)?;
            let state = stage1_finetune(&mut net, data, &sched, stage_cfg)?;
            (stage1_checkpoint(&net)?, state)
        }
        Stage::Stage2Face | Stage::Stage2Hand => {
            let kind = stage.expert().expect("expert stage");
            let base = load_stage1(dir)?;
            let (set, state) =
                stage2_train_expert(&base, kind, &cfg.stage.wrap_layers, data, &sched, stage_cfg)?;
            (set.to_checkpoint()?, state)
        }
        Stage::Stage3 => {
            // Name the missing expert before loading anything else.
            let face = load_expert(dir, ExpertKind::Face)?;
            let hand = load_expert(dir, ExpertKind::Hand)?;
            let base = load_stage1(dir)?;
            let mut net = assemble_mole(&base, Some(&face), Some(&hand))?;
            let state = stage3_train_gating(&mut net, data, &sched, stage_cfg)?;
            (stage3_checkpoint(&net)?, state)
        }
    };
    put_schedule(&mut ck, &cfg.schedule)?;
    let path = stage_path(dir, stage);
    ck.save(&path)?;
    Ok((path, state))
}

/// Every artifact of a full in-memory pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub untrained: DenoiserNet<f32>,
    pub stage1: DenoiserNet<f32>,
    pub face: ExpertSet,
    pub hand: ExpertSet,
    pub stage3: DenoiserNet<f32>,
    pub states: Vec<(Stage, TrainState)>,
}

pub fn run_pipeline(cfg: &RunConfig, data: &Dataset) -> Result<PipelineRun> {
    let sched = cfg.schedule();
    let untrained = DenoiserNet::init(cfg.model, cfg.stage.init_seed)?;
    let mut stage1 = untrained.clone();
    let s1 = stage1_finetune(&mut stage1, data, &sched, &cfg.stage.stage1)?;
    let layers = &cfg.stage.wrap_layers;
    let (face, s2f) = stage2_train_expert(
        &stage1,
        ExpertKind::Face,
        layers,
        data,
        &sched,
        &cfg.stage.stage2_face,
    )?;
    let (hand, s2h) = stage2_train_expert(
        &stage1,
        ExpertKind::Hand,
        layers,
        data,
        &sched,
        &cfg.stage.stage2_hand,
    )?;
    let mut stage3 = assemble_mole(&stage1, Some(&face), Some(&hand))?;
    let s3 = stage3_train_gating(&mut stage3, data, &sched, &cfg.stage.stage3)?;
    Ok(PipelineRun {
        untrained,
        stage1,
        face,
        hand,
        stage3,
        states: vec![
            (Stage::Stage1, s1),
            (Stage::Stage2Face, s2f),
            (Stage::Stage2Hand, s2h),
            (Stage::Stage3, s3),
        ],
    })
}

fn heldout_split(kind: SceneKind) -> Split {
    match kind {
        SceneKind::Scene => Split::SceneHeldout,
        SceneKind::FaceCloseup => Split::FaceHeldout,
        SceneKind::HandCloseup => Split::HandHeldout,
    }
}

/// Traced generations for `kind`: run k starts from held-out image k of that
/// kind, noised to the analysis start step.
pub fn analysis_runs(cfg: &RunConfig, data: &Dataset, kind: SceneKind) -> Result<Vec<SampleRun>> {
    let refs = data.split(heldout_split(kind));
    if refs.is_empty() {
        return Err(MoleError::EmptyInput {
            op: "analysis references",
        });
    }
    let t_start = cfg.analysis.start_step(&cfg.schedule());
    Ok((0..cfg.analysis.runs)
        .map(|k| SampleRun {
            seed: cfg.analysis.seed + k as u64,
            start: SampleStart::Guided {
                reference: refs[k % refs.len()].image.clone(),
                t_start,
            },
        })
        .collect())
}

pub fn analyze_group(
    net: &DenoiserNet<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    kind: SceneKind,
) -> Result<(GateTrace, NormTrace)> {
    let runs = analysis_runs(cfg, data, kind)?;
    let traces = collect_traces(net, &cfg.schedule(), &runs)?;
    Ok((
        GateTrace::from_run_traces(&traces, kind.name())?,
        NormTrace::from_run_traces(&traces, kind.name())?,
    ))
}

/// Writes the per-layer and layer-averaged gate CSVs, the norm CSV and
/// optional heatmaps; returns the files written.
pub fn write_analysis(
    dir: &Path,
    gates: &GateTrace,
    norms: &NormTrace,
    grid: usize,
    heatmaps: bool,
) -> Result<Vec<PathBuf>> {
    let root = dir.join("analysis");
    let group = &gates.group;
    let mut written = vec![
        root.join("gates").join(format!("{group}.csv")),
        root.join("gates").join(format!("{group}.layer_mean.csv")),
        root.join("norms").join(format!("{group}.csv")),
    ];
    export_gate_csv(gates, &written[0])?;
    export_gate_csv(&gates.layer_averaged(), &written[1])?;
    export_norm_csv(norms, &written[2])?;
    if heatmaps {
        let experts = gates
            .score_maps
            .iter()
            .map(|m| m.expert + 1)
            .max()
            .unwrap_or(0);
        for m in &gates.score_maps {
            let path = root.join("heatmaps").join(format!(
                "{group}.layer{}.{}.pgm",
                m.layer,
                expert_label(m.expert, experts)
            ));
            export_heatmap(&m.values, grid, grid, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
