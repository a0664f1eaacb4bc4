//! Trace averaging, norm recomputation and export fidelity on real networks.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{quick_run, small_data};
use mole::config::ScheduleConfig;
use mole::diffusion::{
    p_sample_loop_from, DenoiserNet, HiddenLayer, NetConfig, NoiseSchedule, SampleStart, Split,
};
use mole::lora::ExpertKind;
use mole::mole::LayerProbe;
use mole::pipeline::{assemble_mole, attach_fresh_experts, ExpertSet};
use mole::telemetry::{
    collect_traces, expert_norms, gate_csv, norm_csv, parse_gate_csv, trace_gates, GateTrace,
    NormTrace, SampleRun,
};
use mole::tensor::Tensor;
use mole::workflow::{analyze_group, write_analysis};
use mole::MoleError;

const LAYERS: [usize; 3] = [0, 1, 2];

fn sched(steps: usize) -> NoiseSchedule {
    ScheduleConfig {
        steps,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap()
}

fn gated_net(seed: u64) -> DenoiserNet<f32> {
    DenoiserNet::random_gated(NetConfig::default(), &LAYERS, 4, seed).unwrap()
}

fn noise_runs(seeds: impl IntoIterator<Item = u64>) -> Vec<SampleRun> {
    seeds
        .into_iter()
        .map(|seed| SampleRun {
            seed,
            start: SampleStart::Noise,
        })
        .collect()
}

fn col_stats(s: &Tensor<f64>, k: usize) -> (f64, f64, f64) {
    let (n, e) = (s.shape()[0], s.shape()[1]);
    let col: Vec<f64> = (0..n).map(|r| s.data()[r * e + k]).collect();
    (
        col.iter().sum::<f64>() / n as f64,
        col.iter().copied().fold(f64::INFINITY, f64::min),
        col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

#[test]
fn twenty_run_average_is_the_sum_over_twenty() {
    let net = gated_net(1);
    let sched = sched(8);
    let traces = collect_traces(&net, &sched, &noise_runs(100..120)).unwrap();
    let gates = GateTrace::from_run_traces(&traces, "g").unwrap();
    let norms = NormTrace::from_run_traces(&traces, "g").unwrap();
    assert_eq!(gates.runs, 20);
    assert_eq!(gates.records.len(), 8 * LAYERS.len());
    for rec in &gates.records {
        let si = traces[0]
            .steps
            .iter()
            .position(|s| s.t == rec.step)
            .unwrap();
        let li = rec.layer.unwrap();
        for (k, eg) in rec.experts.iter().enumerate() {
            let mut want = [0.0; 4];
            for tr in &traces {
                let p = &tr.steps[si].layers[li];
                let (m, lo, hi) = col_stats(&p.s, k);
                want[0] += p.g[k];
                want[1] += m;
                want[2] += lo;
                want[3] += hi;
            }
            let got = [eg.g, eg.s_mean, eg.s_min, eg.s_max];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w / 20.0).abs() <= 1e-12);
            }
            assert!(eg.g > 0.0 && eg.g < 1.0);
        }
    }
    for (si, rec) in norms.records.iter().enumerate() {
        for k in 0..2 {
            let total: f64 = traces
                .iter()
                .flat_map(|tr| tr.steps[si].layers.iter().map(move |p| p.branch_norms[k]))
                .sum();
            assert!((rec.norms[k] - total / (20.0 * LAYERS.len() as f64)).abs() <= 1e-12);
            assert!(rec.norms[k].is_finite() && rec.norms[k] >= 0.0);
        }
    }
}

#[test]
fn one_run_and_duplicated_runs_average_to_themselves() {
    let net = gated_net(2);
    let sched = sched(5);
    let one = trace_gates(&net, &sched, &noise_runs([7]), "x").unwrap();
    let twice = trace_gates(&net, &sched, &noise_runs([7, 7]), "x").unwrap();
    let traces = collect_traces(&net, &sched, &noise_runs([7])).unwrap();
    for (rec, dup) in one.records.iter().zip(&twice.records) {
        let p = &traces[0]
            .steps
            .iter()
            .find(|s| s.t == rec.step)
            .unwrap()
            .layers[rec.layer.unwrap()];
        for k in 0..2 {
            assert_eq!(rec.experts[k].g, p.g[k]);
            assert_eq!(dup.experts[k], rec.experts[k]);
        }
    }
}

#[test]
fn steps_cover_exactly_the_chain_that_ran() {
    let net = gated_net(3);
    let sched = sched(20);
    let data = small_data();
    let runs = vec![SampleRun {
        seed: 1,
        start: SampleStart::Guided {
            reference: data.split(Split::FaceHeldout)[0].image.clone(),
            t_start: 6,
        },
    }];
    let trace = trace_gates(&net, &sched, &runs, "face_closeup").unwrap();
    assert_eq!(trace.steps(), vec![6, 5, 4, 3, 2, 1, 0]);
    let full = trace_gates(&net, &sched, &noise_runs([1]), "x").unwrap();
    assert_eq!(full.steps(), (0..20).rev().collect::<Vec<_>>());
}

/// Walks the network layer by layer with the public layer API and compares
/// each branch norm the probe recorded.
#[test]
fn recorded_norms_match_an_independent_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net: DenoiserNet<f64> =
        DenoiserNet::random_gated(NetConfig::default(), &[0, 2], 3, 9).unwrap();
    let x = Tensor::randn([16, 16], 1.0, &mut rng);
    for t in [0, 17, 60] {
        let mut probes: Vec<LayerProbe> = Vec::new();
        net.predict_eps_traced(&x, t, Some(&mut probes)).unwrap();
        assert_eq!(probes.len(), 2);
        let mut h = net.input_tokens(&x, t).unwrap();
        let mut seen = 0;
        for layer in &net.hidden {
            let y = match layer {
                HiddenLayer::Mole(m) => {
                    let gates = m.gating(&h).unwrap();
                    let n = h.shape()[0];
                    for k in 0..2 {
                        let s_k = Tensor::from_fn([n, 1], |r| gates.s.get2(r, k));
                        let y_k = m.expert_branch(k, &h, &s_k, gates.g.data()[k]).unwrap();
                        let rec = probes[seen].branch_norms[k];
                        assert!((rec - y_k.norm()).abs() <= 1e-10 * (1.0 + y_k.norm()));
                        assert!((probes[seen].g[k] - gates.g.data()[k]).abs() <= 1e-12);
                    }
                    seen += 1;
                    m.forward(&h).unwrap()
                }
                HiddenLayer::Plain(b) => b.forward(&h).unwrap(),
                HiddenLayer::Adapted { .. } => unreachable!(),
            };
            h = Tensor::from_fn(y.shape().to_vec(), |k| {
                let v = y.data()[k];
                v / (1.0 + (-v).exp())
            });
        }
    }
}

#[test]
fn saturated_gates_record_plain_expert_norms() {
    let mut net: DenoiserNet<f64> =
        DenoiserNet::random_gated(NetConfig::default(), &[1], 3, 5).unwrap();
    let HiddenLayer::Mole(m) = &mut net.hidden[1] else {
        panic!("layer 1 is gated")
    };
    m.gates.phi_bias = Tensor::full([2], 30.0);
    m.gates.omega_bias = Tensor::full([2], 30.0);
    m.gates.phi = Tensor::zeros([m.base.d_in(), 2]);
    m.gates.omega = Tensor::zeros([m.base.d_in(), 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn([16, 16], 1.0, &mut rng);
    let mut probes = Vec::new();
    net.predict_eps_traced(&x, 30, Some(&mut probes)).unwrap();
    let tokens = net.input_tokens(&x, 30).unwrap();
    let HiddenLayer::Plain(b0) = &net.hidden[0] else {
        panic!("layer 0 is plain")
    };
    let y0 = b0.forward(&tokens).unwrap();
    let h = Tensor::from_fn(y0.shape().to_vec(), |k| {
        y0.data()[k] / (1.0 + (-y0.data()[k]).exp())
    });
    let HiddenLayer::Mole(m) = &net.hidden[1] else {
        unreachable!()
    };
    for k in 0..2 {
        let plain = m.experts[k].apply(&h).unwrap().norm();
        assert!((probes[0].branch_norms[k] - plain).abs() <= 1e-6 * plain);
    }
}

#[test]
fn fresh_experts_have_exactly_zero_norm() {
    let base = DenoiserNet::init(NetConfig::default(), 0).unwrap();
    let fp = base.base_fingerprint();
    let set = |kind| {
        let net = attach_fresh_experts(&base, kind, &LAYERS, 4, 1).unwrap();
        ExpertSet::from_adapted(&net, kind, fp).unwrap()
    };
    let mut net = assemble_mole(
        &base,
        Some(&set(ExpertKind::Face)),
        Some(&set(ExpertKind::Hand)),
    )
    .unwrap();
    for l in net.hidden.iter_mut() {
        if let HiddenLayer::Mole(m) = l {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            m.gates.phi = Tensor::randn([m.base.d_in(), 2], 1.0, &mut rng);
        }
    }
    let norms = expert_norms(&net, &sched(6), &noise_runs([3, 4]), "x").unwrap();
    assert!(norms
        .records
        .iter()
        .all(|r| r.norms.iter().all(|&v| v == 0.0)));
}

#[test]
fn tracing_never_changes_the_images() {
    let net = gated_net(7);
    let sched = sched(30);
    let data = small_data();
    let starts = [
        SampleStart::Noise,
        SampleStart::Guided {
            reference: data.split(Split::HandHeldout)[1].image.clone(),
            t_start: 12,
        },
    ];
    for start in &starts {
        for seed in [0, 41] {
            let (plain, none) = p_sample_loop_from(&net, &sched, seed, false, start).unwrap();
            let (traced, some) = p_sample_loop_from(&net, &sched, seed, true, start).unwrap();
            assert!(none.is_none() && some.is_some());
            assert_eq!(plain.to_le_bytes(), traced.to_le_bytes());
        }
    }
}

#[test]
fn exported_csv_reads_back_the_trace() {
    let net = gated_net(8);
    let trace = trace_gates(&net, &sched(4), &noise_runs([1, 2, 3]), "face_closeup").unwrap();
    let text = gate_csv(&trace);
    assert!(!text.contains('\r'));
    let rows = parse_gate_csv(&text).unwrap();
    assert_eq!(rows.len(), 4 * LAYERS.len() * 2);
    let mut it = rows.iter();
    for rec in &trace.records {
        for (k, eg) in rec.experts.iter().enumerate() {
            let row = it.next().unwrap();
            assert_eq!(row.step, rec.step);
            assert_eq!(row.layer, rec.layer.unwrap().to_string());
            assert_eq!(row.expert, ["face", "hand"][k]);
            for (got, want) in row.values.iter().zip([eg.g, eg.s_mean, eg.s_min, eg.s_max]) {
                assert!((got - want).abs() <= 1e-9);
            }
        }
    }
    let averaged = parse_gate_csv(&gate_csv(&trace.layer_averaged())).unwrap();
    assert_eq!(averaged.len(), 4 * 2);
    assert!(averaged.iter().all(|r| r.layer == "mean"));

    let norms = expert_norms(&net, &sched(4), &noise_runs([1, 2, 3]), "face_closeup").unwrap();
    let text = norm_csv(&norms);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,y1_norm,y2_norm"));
    for (line, rec) in lines.zip(&norms.records) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, rec.step);
        assert!((f[1] - rec.norms[0]).abs() <= 1e-9 && (f[2] - rec.norms[1]).abs() <= 1e-9);
    }
}

#[test]
fn analysis_files_land_in_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_run(dir.path());
    cfg.schedule.steps = 10;
    let data = small_data();
    let net = gated_net(9);
    let (gates, norms) =
        analyze_group(&net, &cfg, &data, mole::diffusion::SceneKind::HandCloseup).unwrap();
    assert_eq!(gates.runs, cfg.analysis.runs);
    let files = write_analysis(dir.path(), &gates, &norms, net.config().grid(), true).unwrap();
    let root = dir.path().join("analysis");
    for rel in [
        "gates/hand_closeup.csv",
        "gates/hand_closeup.layer_mean.csv",
        "norms/hand_closeup.csv",
        "heatmaps/hand_closeup.layer0.face.pgm",
        "heatmaps/hand_closeup.layer2.hand.pgm",
    ] {
        assert!(
            files.contains(&root.join(rel)),
            "{rel} missing from {files:?}"
        );
        assert!(root.join(rel).is_file());
    }
    let pgm = std::fs::read(root.join("heatmaps/hand_closeup.layer1.hand.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
}

#[test]
fn plain_networks_cannot_be_traced() {
    let net = DenoiserNet::init(NetConfig::default(), 0).unwrap();
    let err = trace_gates(&net, &sched(3), &noise_runs([1]), "x").unwrap_err();
    assert!(matches!(err, MoleError::Contract(_)));
    assert!(expert_norms(&net, &sched(3), &noise_runs([1]), "x").is_err());
}
