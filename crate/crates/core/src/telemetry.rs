//! Gate trajectories and expert output norms over sampling runs, with CSV
//! and PGM export.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{p_sample_loop_from, DenoiserNet, NoiseSchedule, RunTrace, SampleStart};
use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

pub const GATE_CSV_HEADER: &str = "step,layer,expert,g,s_mean,s_min,s_max";

/// One traced generation: its seed and where the chain starts.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub seed: u64,
    pub start: SampleStart<f32>,
}

/// Gate statistics of one expert at one (step, layer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertGate {
    pub g: f64,
    pub s_mean: f64,
    pub s_min: f64,
    pub s_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub step: usize,
    /// Position among the gated layers; `None` marks a layer-averaged record.
    pub layer: Option<usize>,
    pub experts: Vec<ExpertGate>,
}

/// Mean score map of one (layer, expert), over all steps and runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub layer: usize,
    pub expert: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub group: String,
    pub runs: usize,
    /// Ordered by sampling step (descending t), then layer.
    pub records: Vec<GateRecord>,
    pub score_maps: Vec<ScoreMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormRecord {
    pub step: usize,
    /// `‖Y_i‖₂` per expert, averaged over layers.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormTrace {
    pub group: String,
    pub runs: usize,
    pub records: Vec<NormRecord>,
}

pub use crate::lora::slot_label as expert_label;

fn check_gated(net: &DenoiserNet<f32>) -> Result<()> {
    if net.mole_layer_count() == 0 {
        return Err(MoleError::Contract(
            "telemetry needs at least one gated layer; the network has none".into(),
        ));
    }
    Ok(())
}

/// Runs each sampling run with tracing on.
pub fn collect_traces(
    net: &DenoiserNet<f32>,
    sched: &NoiseSchedule,
    runs: &[SampleRun],
) -> Result<Vec<RunTrace>> {
    check_gated(net)?;
    runs.iter()
        .map(|r| {
            let (_, trace) = p_sample_loop_from(net, sched, r.seed, true, &r.start)?;
            Ok(trace.expect("tracing requested"))
        })
        .collect()
}

/// Step list and per-step layer count shared by every run.
fn check_aligned(traces: &[RunTrace]) -> Result<()> {
    let first = traces.first().ok_or(MoleError::EmptyInput {
        op: "trace average",
    })?;
    for tr in traces {
        let same = tr.steps.len() == first.steps.len()
            && tr.steps.iter().zip(&first.steps).all(|(a, b)| {
                a.t == b.t
                    && a.layers.len() == b.layers.len()
                    && a.layers
                        .iter()
                        .zip(&b.layers)
                        .all(|(x, y)| x.g.len() == y.g.len())
            });
        if !same {
            return Err(MoleError::Contract(
                "traces cover different steps or layers".into(),
            ));
        }
    }
    Ok(())
}

fn column_stats(s: &Tensor<f64>, k: usize) -> (f64, f64, f64) {
    let (n, e) = (s.shape()[0], s.shape()[1]);
    let col = (0..n).map(|r| s.data()[r * e + k]);
    let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for v in col {
        sum += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (sum / n as f64, lo, hi)
}

impl GateTrace {
    /// Exact per-(step, layer) means over the given runs.
    pub fn from_run_traces(traces: &[RunTrace], group: &str) -> Result<Self> {
        check_aligned(traces)?;
        let runs = traces.len() as f64;
        let first = &traces[0];
        let mut records = Vec::new();
        let mut maps: Vec<ScoreMap> = Vec::new();
        let mut map_terms = 0.0;
        for (si, step) in first.steps.iter().enumerate() {
            for (li, probe0) in step.layers.iter().enumerate() {
                let e = probe0.g.len();
                let mut acc = vec![
                    ExpertGate {
                        g: 0.0,
                        s_mean: 0.0,
                        s_min: 0.0,
                        s_max: 0.0
                    };
                    e
                ];
                for tr in traces {
                    let p = &tr.steps[si].layers[li];
                    for (k, a) in acc.iter_mut().enumerate() {
                        let (m, lo, hi) = column_stats(&p.s, k);
                        a.g += p.g[k];
                        a.s_mean += m;
                        a.s_min += lo;
                        a.s_max += hi;
                    }
                    let n = p.s.shape()[0];
                    for k in 0..e {
                        let map = match maps.iter_mut().find(|m| m.layer == li && m.expert == k) {
                            Some(m) => m,
                            None => {
                                maps.push(ScoreMap {
                                    layer: li,
                                    expert: k,
                                    values: vec![0.0; n],
                                });
                                maps.last_mut().expect("just pushed")
                            }
                        };
                        for (r, v) in map.values.iter_mut().enumerate() {
                            *v += p.s.data()[r * e + k];
                        }
                    }
                }
                for a in acc.iter_mut() {
                    a.g /= runs;
                    a.s_mean /= runs;
                    a.s_min /= runs;
                    a.s_max /= runs;
                }
                records.push(GateRecord {
                    step: step.t,
                    layer: Some(li),
                    experts: acc,
                });
            }
            map_terms += runs;
        }
        for m in maps.iter_mut() {
            m.values.iter_mut().for_each(|v| *v /= map_terms);
        }
        Ok(Self {
            group: group.to_string(),
            runs: traces.len(),
            records,
            score_maps: maps,
        })
    }

    /// One record per step with every field averaged over layers.
    pub fn layer_averaged(&self) -> GateTrace {
        let mut out: Vec<GateRecord> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(last) if last.step == r.step => {
                    for (a, b) in last.experts.iter_mut().zip(&r.experts) {
                        a.g += b.g;
                        a.s_mean += b.s_mean;
                        a.s_min += b.s_min;
                        a.s_max += b.s_max;
                    }
                    *counts.last_mut().expect("paired") += 1.0;
                }
                _ => {
                    out.push(GateRecord {
                        step: r.step,
                        layer: None,
                        experts: r.experts.clone(),
                    });
                    counts.push(1.0);
                }
            }
        }
        for (r, c) in out.iter_mut().zip(counts) {
            for a in r.experts.iter_mut() {
                a.g /= c;
                a.s_mean /= c;
                a.s_min /= c;
                a.s_max /= c;
            }
        }
        GateTrace {
            group: self.group.clone(),
            runs: self.runs,
            records: out,
            score_maps: Vec::new(),
        }
    }

    /// Mean of expert `k`'s global gate over all records.
    pub fn mean_g(&self, k: usize) -> f64 {
        let vals: Vec<f64> = self.records.iter().map(|r| r.experts[k].g).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.step) {
                out.push(r.step);
            }
        }
        out
    }
}

impl NormTrace {
    pub fn from_run_traces(traces: &[RunTrace], group: &str) -> Result<Self> {
        check_aligned(traces)?;
        let runs = traces.len() as f64;
        let records = traces[0]
            .steps
            .iter()
            .enumerate()
            .map(|(si, step)| {
                let e = step.layers.first().map_or(0, |l| l.branch_norms.len());
                let layers = step.layers.len() as f64;
                let mut norms = vec![0.0; e];
                for tr in traces {
                    for p in &tr.steps[si].layers {
                        for (acc, v) in norms.iter_mut().zip(&p.branch_norms) {
                            *acc += v;
                        }
                    }
                }
                norms.iter_mut().for_each(|v| *v /= runs * layers);
                NormRecord {
                    step: step.t,
                    norms,
                }
            })
            .collect();
        Ok(Self {
            group: group.to_string(),
            runs: traces.len(),
            records,
        })
    }
}

pub fn trace_gates(
    net: &DenoiserNet<f32>,
    sched: &NoiseSchedule,
    runs: &[SampleRun],
    group: &str,
) -> Result<GateTrace> {
    GateTrace::from_run_traces(&collect_traces(net, sched, runs)?, group)
}

pub fn expert_norms(
    net: &DenoiserNet<f32>,
    sched: &NoiseSchedule,
    runs: &[SampleRun],
    group: &str,
) -> Result<NormTrace> {
    NormTrace::from_run_traces(&collect_traces(net, sched, runs)?, group)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MoleError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| MoleError::io(path, e))
}

pub fn gate_csv(trace: &GateTrace) -> String {
    let mut out = String::from(GATE_CSV_HEADER);
    out.push('\n');
    for r in &trace.records {
        let layer = r.layer.map_or("mean".to_string(), |l| l.to_string());
        for (k, e) in r.experts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e}",
                r.step,
                layer,
                expert_label(k, r.experts.len()),
                e.g,
                e.s_mean,
                e.s_min,
                e.s_max
            )
            .expect("string write");
        }
    }
    out
}

pub fn norm_csv(trace: &NormTrace) -> String {
    let e = trace.records.first().map_or(2, |r| r.norms.len());
    let mut out = String::from("step");
    for k in 1..=e {
        write!(out, ",y{k}_norm").expect("string write");
    }
    out.push('\n');
    for r in &trace.records {
        write!(out, "{}", r.step).expect("string write");
        for v in &r.norms {
            write!(out, ",{v:.12e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn export_gate_csv(trace: &GateTrace, path: &Path) -> Result<()> {
    write_text(path, &gate_csv(trace))
}

pub fn export_norm_csv(trace: &NormTrace, path: &Path) -> Result<()> {
    write_text(path, &norm_csv(trace))
}

/// A parsed gate CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub step: usize,
    pub layer: String,
    pub expert: String,
    pub values: [f64; 4],
}

pub fn parse_gate_csv(text: &str) -> Result<Vec<GateRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(GATE_CSV_HEADER) {
        return Err(MoleError::Malformed("gate CSV header missing".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || MoleError::Malformed(format!("gate CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(GateRow {
                step: f[0].parse().map_err(|_| bad())?,
                layer: f[1].to_string(),
                expert: f[2].to_string(),
                values: [num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?],
            })
        })
        .collect()
}

/// P5 bytes for a `rows × cols` map with values in `[0, 1]`.
pub fn heatmap_pgm(s_map: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if s_map.len() != rows * cols {
        return Err(MoleError::dim(
            "export_heatmap",
            &[s_map.len()],
            &[rows, cols],
        ));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    // round half up
    out.extend(
        s_map
            .iter()
            .map(|&s| (255.0 * s + 0.5).floor().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn export_heatmap(s_map: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let bytes = heatmap_pgm(s_map, rows, cols)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MoleError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| MoleError::io(path, e))
}
