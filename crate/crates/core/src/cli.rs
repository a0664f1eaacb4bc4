//! `mole` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::config::{load_config, RunConfig, OUT_ENV};
use crate::diffusion::{
    draw_samples, gradcheck_loss, p_sample_loop, DenoiserNet, SceneKind, Weighting,
};
use crate::error::{MoleError, Result};
use crate::pipeline::Stage;
use crate::telemetry::{export_gate_csv, export_norm_csv, heatmap_pgm, GateTrace, NormTrace};
use crate::tensor::DEFAULT_STEP;
use crate::workflow;

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "mole",
    version,
    about = "Mixture of low-rank experts on a toy diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic datasets into <out_dir>/data.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one training stage (or `all`), writing <out_dir>/<stage>.mole.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// stage1, stage2-face, stage2-hand, stage3 or all
        #[arg(long)]
        stage: String,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Half-open range `a..b`, or inclusive `a..=b`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedRange,
        /// Also record gate and expert-norm traces (gated networks only).
        #[arg(long)]
        trace: bool,
        /// Output directory (default: $MOLE_OUT, else <ckpt dir>/samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gate and norm telemetry for one image group of a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// face_closeup, hand_closeup or scene
        #[arg(long)]
        group: String,
    },
    /// Finite-difference check of the gated toy network's loss gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// List the tensor directory of a checkpoint.
    InspectCkpt { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.end
    }
}

pub fn parse_seeds(s: &str) -> std::result::Result<SeedRange, String> {
    let bad = || format!("expected a..b or a..=b, got {s:?}");
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let start: u64 = a.trim().parse().map_err(|_| bad())?;
    let mut end: u64 = b.trim().parse().map_err(|_| bad())?;
    if inclusive {
        end = end.checked_add(1).ok_or_else(bad)?;
    }
    if end <= start {
        return Err(format!("seed range {s:?} is empty"));
    }
    Ok(SeedRange { start, end })
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config } => gen_data(&load_config(&config)?),
        Command::Train { config, stage } => train(&load_config(&config)?, &stage),
        Command::Sample {
            ckpt,
            seeds,
            trace,
            out,
        } => sample(&ckpt, seeds, trace, out),
        Command::Analyze { run, group } => analyze(&run, &group),
        Command::Gradcheck { config, step } => gradcheck(&load_config(&config)?, step),
        Command::InspectCkpt { file } => inspect(&file),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = crate::diffusion::Dataset::generate(&cfg.data, cfg.model.image_size)?;
    let dir = workflow::data_dir(&cfg.out_dir);
    data.save(&dir)?;
    let (ck, _) = data.to_checkpoint();
    say!("wrote {} images to {}", ck.len(), dir.display());
    Ok(())
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| MoleError::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).map_err(|e| MoleError::io(&path, e))
}

fn train(cfg: &RunConfig, stage: &str) -> Result<()> {
    let stages: Vec<Stage> = match stage {
        "all" => Stage::ALL.to_vec(),
        s => vec![Stage::parse(s).ok_or_else(|| {
            MoleError::Config(format!(
                "--stage: unknown stage {s:?} (stage1, stage2-face, stage2-hand, stage3, all)"
            ))
        })?],
    };
    // Check the preset before touching the run directory.
    for &s in &stages {
        let c = cfg.stage.get(s);
        if !c.runnable {
            return Err(MoleError::Config(format!(
                "stage.{}: preset {} is recorded for provenance and cannot run at this scale",
                s.name().replace('-', "_"),
                c.preset.as_deref().unwrap_or("?")
            )));
        }
    }
    write_config(cfg)?;
    let data = workflow::dataset(cfg)?;
    for s in stages {
        let (path, state) = workflow::train_stage(cfg, s, &data)?;
        let h = &state.loss_history;
        let k = h.len().clamp(1, 10);
        let head = h.iter().take(k).sum::<f64>() / k as f64;
        let tail = h.iter().rev().take(k).sum::<f64>() / k as f64;
        say!(
            "{s}: {} steps, loss {head:.5} -> {tail:.5}, wrote {}",
            h.len(),
            path.display()
        );
    }
    Ok(())
}

fn sample(ckpt: &Path, seeds: SeedRange, trace: bool, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    if !ck.contains("meta.model") {
        return Err(MoleError::Contract(format!(
            "{} is not a network checkpoint (expert files cannot be sampled alone)",
            ckpt.display()
        )));
    }
    let net = DenoiserNet::<f32>::from_checkpoint(&ck)?;
    if trace && net.mole_layer_count() == 0 {
        return Err(MoleError::Contract(format!(
            "--trace needs a gated network; {} has no gated layers",
            ckpt.display()
        )));
    }
    let sched = workflow::schedule_of(&ck)?;
    let dir = out
        .or_else(|| {
            std::env::var_os(OUT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("samples"));
    std::fs::create_dir_all(&dir).map_err(|e| MoleError::io(&dir, e))?;
    let size = net.config().image_size;
    let mut images = Checkpoint::new();
    for seed in seeds.seeds() {
        let (img, run) = p_sample_loop(&net, &sched, seed, trace)?;
        if !img.all_finite() {
            return Err(MoleError::Numeric(format!("sample {seed} is not finite")));
        }
        let unit: Vec<f64> = img
            .data()
            .iter()
            .map(|&v| (f64::from(v) + 1.0) / 2.0)
            .collect();
        let pgm = dir.join(format!("sample.{seed}.pgm"));
        std::fs::write(&pgm, heatmap_pgm(&unit, size, size)?)
            .map_err(|e| MoleError::io(&pgm, e))?;
        images.insert(format!("sample.{seed}"), &img)?;
        if let Some(run) = run {
            let runs = [run];
            let label = format!("seed{seed}");
            export_gate_csv(
                &GateTrace::from_run_traces(&runs, &label)?,
                &dir.join(format!("gates.{seed}.csv")),
            )?;
            export_norm_csv(
                &NormTrace::from_run_traces(&runs, &label)?,
                &dir.join(format!("norms.{seed}.csv")),
            )?;
        }
    }
    images.save(dir.join("samples.mole"))?;
    say!("wrote {} samples to {}", images.len(), dir.display());
    Ok(())
}

fn analyze(run: &Path, group: &str) -> Result<()> {
    let kind = SceneKind::parse(group).ok_or_else(|| {
        MoleError::Config(format!(
            "--group: unknown group {group:?} (face_closeup, hand_closeup, scene)"
        ))
    })?;
    let cfg_path = run.join("config.json");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| MoleError::io(&cfg_path, e))?;
    let mut cfg = RunConfig::from_json(&text, None)?;
    cfg.out_dir = run.to_path_buf();
    let net = workflow::load_stage3(run)?;
    let data = workflow::dataset(&cfg)?;
    let (gates, norms) = workflow::analyze_group(&net, &cfg, &data, kind)?;
    let files = workflow::write_analysis(
        run,
        &gates,
        &norms,
        net.config().grid(),
        cfg.analysis.heatmaps,
    )?;
    let means: Vec<String> = (0..2)
        .map(|k| {
            format!(
                "g_{}={:.4}",
                crate::telemetry::expert_label(k, 2),
                gates.mean_g(k)
            )
        })
        .collect();
    say!(
        "{}: {} runs, {} steps, {}",
        kind,
        gates.runs,
        gates.steps().len(),
        means.join(" ")
    );
    for f in files {
        say!("wrote {}", f.display());
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, h: f64) -> Result<()> {
    let net = DenoiserNet::<f64>::random_gated(
        cfg.model,
        &cfg.stage.wrap_layers,
        cfg.stage.stage2_face.rank,
        cfg.stage.init_seed,
    )?;
    let data = crate::diffusion::Dataset::generate(
        &crate::diffusion::DataConfig {
            scenes: 1,
            face_closeups: 1,
            hand_closeups: 1,
            heldout: 1,
            ..cfg.data
        },
        cfg.model.image_size,
    )?;
    let sched = cfg.schedule();
    let images = data.images(&[
        crate::diffusion::Split::SceneTrain,
        crate::diffusion::Split::FaceTrain,
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage.init_seed);
    let batch = draw_samples(&images, &sched, &mut rng);
    let report = gradcheck_loss(&net, &batch, &sched, Weighting::default(), h)?;
    for (name, err) in &report.per_param {
        say!("{name:<28} {err:.3e}");
    }
    let (worst, err) = report.worst().unwrap_or(("-", 0.0));
    say!(
        "checked {} entries; max relative error {err:.3e} ({worst})",
        report.entries_checked
    );
    if err > GRADCHECK_TOLERANCE || !err.is_finite() {
        return Err(MoleError::Numeric(format!(
            "gradcheck: {worst} has relative error {err:.3e} > {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn inspect(file: &Path) -> Result<()> {
    let ck = Checkpoint::load(file)?;
    say!("{}: {} tensors", file.display(), ck.len());
    let mut offset = 0usize;
    for (name, t) in ck.iter() {
        let numel: usize = t.shape().iter().product();
        let dtype = match t {
            AnyTensor::F32(_) => "f32",
            AnyTensor::F64(_) => "f64",
        };
        say!("{name:<32} {dtype} {:?} @{offset}", t.shape());
        offset += numel * t.dtype().size_of();
    }
    Ok(())
}
