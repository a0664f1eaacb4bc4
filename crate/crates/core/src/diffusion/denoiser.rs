//! Token-MLP ε-predictor over image patches.
//!
//! Each patch becomes one token: its pixels, a fixed 2-D position code and
//! a sinusoidal timestep code. Hidden layers are linear maps with SiLU in
//! between, and any of them can carry a low-rank expert or a full gated
//! mixture. A linear head maps tokens back to patch pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::error::{MoleError, Result};
use crate::lora::{slot_label, ExpertKind, LowRankExpert};
use crate::mole::{BaseLinear, GatingParams, LayerProbe, MoLELayer};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    pub patch: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub pos_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            hidden_width: 64,
            hidden_layers: 3,
            time_dim: 8,
            pos_dim: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MoleError::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "model.image_size ({}) must be a positive multiple of model.patch ({})",
                self.image_size, self.patch
            ));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return fail("model.hidden_layers and model.hidden_width must be positive".into());
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return fail(format!(
                "model.time_dim must be even and positive, got {}",
                self.time_dim
            ));
        }
        if !self.pos_dim.is_multiple_of(4) {
            return fail(format!(
                "model.pos_dim must be a multiple of 4, got {}",
                self.pos_dim
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn token_dim(&self) -> usize {
        self.patch_dim() + self.pos_dim + self.time_dim
    }

    /// (d_in, d_out) of hidden layer `i`.
    pub fn layer_dims(&self, i: usize) -> (usize, usize) {
        if i == 0 {
            (self.token_dim(), self.hidden_width)
        } else {
            (self.hidden_width, self.hidden_width)
        }
    }

    fn to_meta(self) -> Vec<f64> {
        [
            self.image_size,
            self.patch,
            self.hidden_width,
            self.hidden_layers,
            self.time_dim,
            self.pos_dim,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        let [a, b, c, d, e, f] = v else {
            return Err(MoleError::Contract("meta.model must have 6 entries".into()));
        };
        let cfg = Self {
            image_size: *a as usize,
            patch: *b as usize,
            hidden_width: *c as usize,
            hidden_layers: *d as usize,
            time_dim: *e as usize,
            pos_dim: *f as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which parameters a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    Experts,
    Gates,
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenLayer<T> {
    Plain(BaseLinear<T>),
    /// Base plus one additively applied expert (expert training).
    Adapted {
        base: BaseLinear<T>,
        kind: ExpertKind,
        expert: LowRankExpert<T>,
    },
    Mole(MoLELayer<T>),
}

impl<T: Element> HiddenLayer<T> {
    pub fn base(&self) -> &BaseLinear<T> {
        match self {
            HiddenLayer::Plain(b) | HiddenLayer::Adapted { base: b, .. } => b,
            HiddenLayer::Mole(m) => &m.base,
        }
    }

    fn forward_on(
        &self,
        tape: &mut Tape<T>,
        idx: usize,
        x: &Var<T>,
        probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Var<T>> {
        let prefix = format!("layer.{idx}");
        match self {
            HiddenLayer::Plain(base) => base.forward_on(tape, &format!("{prefix}.base"), x),
            HiddenLayer::Adapted { base, kind, expert } => {
                let y = base.forward_on(tape, &format!("{prefix}.base"), x)?;
                let delta = expert.apply_on(tape, &format!("{prefix}.expert.{kind}"), x)?;
                tape.add(&y, &delta)
            }
            HiddenLayer::Mole(layer) => {
                let mut probe = LayerProbe {
                    s: Tensor::zeros([1]),
                    g: Vec::new(),
                    branch_norms: Vec::new(),
                };
                let want = probes.is_some();
                let y = layer.forward_on(tape, &prefix, x, want.then_some(&mut probe))?;
                if let Some(p) = probes {
                    p.push(probe);
                }
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet<T> {
    config: NetConfig,
    pub hidden: Vec<HiddenLayer<T>>,
    pub head: BaseLinear<T>,
}

/// Appends `sin/cos(t·f_k)` features, frequencies geometric from 1 down to 1/1000.
fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = if half > 1 {
            (-(1000f64).ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

fn pos_features(row: usize, col: usize, grid: usize, dim: usize) -> Vec<f64> {
    let per_axis = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [row, col] {
        let u = (coord as f64 + 0.5) / grid as f64;
        for k in 0..per_axis {
            let a = std::f64::consts::PI * (k + 1) as f64 * u;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

impl<T: Element> DenoiserNet<T> {
    /// Plain network with seeded Gaussian weights.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = (0..config.hidden_layers)
            .map(|i| {
                let (d_in, d_out) = config.layer_dims(i);
                HiddenLayer::Plain(BaseLinear::init(d_in, d_out, &mut rng))
            })
            .collect();
        let head = BaseLinear::init(config.hidden_width, config.patch_dim(), &mut rng);
        let mut net = Self {
            config,
            hidden,
            head,
        };
        net.set_trainable(TrainScope::All);
        Ok(net)
    }

    /// Every listed layer gated over a face and a hand expert, with all
    /// factors and gate weights random so no gradient path is trivially
    /// zero. Every parameter is left trainable. Used for gradient checks.
    pub fn random_gated(
        config: NetConfig,
        layers: &[usize],
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a7e);
        for &i in layers {
            let Some(HiddenLayer::Plain(base)) = net.hidden.get(i).cloned() else {
                return Err(MoleError::Config(format!(
                    "layer {i} is out of range or repeated"
                )));
            };
            let (d_in, d_out) = (base.d_in(), base.d_out());
            let experts = (0..2)
                .map(|_| {
                    let a = Tensor::randn([d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng);
                    let b = Tensor::randn([d_out, rank], 0.3, &mut rng);
                    LowRankExpert::from_parts(a, b, 1.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let gates = GatingParams {
                phi: Tensor::randn([d_in, 2], 0.3, &mut rng),
                phi_bias: Tensor::randn([2], 0.3, &mut rng),
                omega: Tensor::randn([d_in, 2], 0.3, &mut rng),
                omega_bias: Tensor::randn([2], 0.3, &mut rng),
            };
            net.hidden[i] = HiddenLayer::Mole(MoLELayer::from_parts(base, experts, gates)?);
        }
        net.set_trainable(TrainScope::All);
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn is_plain(&self) -> bool {
        self.hidden
            .iter()
            .all(|l| matches!(l, HiddenLayer::Plain(_)))
    }

    pub fn mole_layer_count(&self) -> usize {
        self.hidden
            .iter()
            .filter(|l| matches!(l, HiddenLayer::Mole(_)))
            .count()
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s] {
            return Err(MoleError::dim("denoiser", image.shape(), &[s, s]));
        }
        Ok(())
    }

    /// `[H×W] -> [n × p²]`, patches in row-major grid order.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let (s, p, g) = (
            self.config.image_size,
            self.config.patch,
            self.config.grid(),
        );
        let mut out = Vec::with_capacity(s * s);
        for gr in 0..g {
            for gc in 0..g {
                for r in 0..p {
                    for c in 0..p {
                        out.push(image.data()[(gr * p + r) * s + gc * p + c]);
                    }
                }
            }
        }
        Tensor::new([g * g, p * p], out)
    }

    pub fn unpatchify(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, p, g) = (
            self.config.image_size,
            self.config.patch,
            self.config.grid(),
        );
        if tokens.shape() != [g * g, p * p] {
            return Err(MoleError::dim(
                "unpatchify",
                tokens.shape(),
                &[g * g, p * p],
            ));
        }
        let mut out = vec![T::zero(); s * s];
        for gr in 0..g {
            for gc in 0..g {
                let tok = gr * g + gc;
                for r in 0..p {
                    for c in 0..p {
                        out[(gr * p + r) * s + gc * p + c] = tokens.data()[tok * p * p + r * p + c];
                    }
                }
            }
        }
        Tensor::new([s, s], out)
    }

    /// Token matrix `[n × token_dim]` for a noisy image at step `t`.
    pub fn input_tokens(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let patches = self.patchify(x_t)?;
        let cfg = &self.config;
        let (g, pd, dim) = (cfg.grid(), cfg.patch_dim(), cfg.token_dim());
        let time = time_features(t, cfg.time_dim);
        let mut data = Vec::with_capacity(cfg.tokens() * dim);
        for tok in 0..cfg.tokens() {
            data.extend_from_slice(&patches.data()[tok * pd..(tok + 1) * pd]);
            let pos = pos_features(tok / g, tok % g, g, cfg.pos_dim);
            data.extend(pos.iter().chain(&time).map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new([cfg.tokens(), dim], data)
    }

    /// Predicted noise in token layout, `[n × p²]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        tokens: &Var<T>,
        mut probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Var<T>> {
        let mut h = tokens.clone();
        for (i, layer) in self.hidden.iter().enumerate() {
            let y = layer.forward_on(tape, i, &h, probes.as_deref_mut())?;
            h = tape.silu(&y);
        }
        self.head.forward_on(tape, "head", &h)
    }

    /// Noise prediction as an image.
    pub fn predict_eps(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.predict_eps_traced(x_t, t, None)
    }

    pub fn predict_eps_traced(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let tokens = Var::constant(self.input_tokens(x_t, t)?);
        let out = self.forward_on(&mut tape, &tokens, probes)?;
        self.unpatchify(out.value())
    }

    /// Visits every trainable tensor under its checkpoint name.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for (i, layer) in self.hidden.iter().enumerate() {
            let base = layer.base();
            f(&format!("layer.{i}.base.w"), &base.w);
            f(&format!("layer.{i}.base.bias"), &base.bias);
            match layer {
                HiddenLayer::Plain(_) => {}
                HiddenLayer::Adapted { kind, expert, .. } => {
                    f(&format!("layer.{i}.expert.{kind}.a"), &expert.a);
                    f(&format!("layer.{i}.expert.{kind}.b"), &expert.b);
                }
                HiddenLayer::Mole(m) => {
                    f(&format!("layer.{i}.gates.phi"), &m.gates.phi);
                    f(&format!("layer.{i}.gates.phi_bias"), &m.gates.phi_bias);
                    f(&format!("layer.{i}.gates.omega"), &m.gates.omega);
                    f(&format!("layer.{i}.gates.omega_bias"), &m.gates.omega_bias);
                    let n = m.e();
                    for (k, e) in m.experts.iter().enumerate() {
                        let tag = slot_label(k, n);
                        f(&format!("layer.{i}.expert.{tag}.a"), &e.a);
                        f(&format!("layer.{i}.expert.{tag}.b"), &e.b);
                    }
                }
            }
        }
        f("head.w", &self.head.w);
        f("head.bias", &self.head.bias);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            match layer {
                HiddenLayer::Plain(base) => {
                    f(&format!("layer.{i}.base.w"), &mut base.w);
                    f(&format!("layer.{i}.base.bias"), &mut base.bias);
                }
                HiddenLayer::Adapted { base, kind, expert } => {
                    f(&format!("layer.{i}.base.w"), &mut base.w);
                    f(&format!("layer.{i}.base.bias"), &mut base.bias);
                    f(&format!("layer.{i}.expert.{kind}.a"), &mut expert.a);
                    f(&format!("layer.{i}.expert.{kind}.b"), &mut expert.b);
                }
                HiddenLayer::Mole(m) => {
                    f(&format!("layer.{i}.base.w"), &mut m.base.w);
                    f(&format!("layer.{i}.base.bias"), &mut m.base.bias);
                    f(&format!("layer.{i}.gates.phi"), &mut m.gates.phi);
                    f(&format!("layer.{i}.gates.phi_bias"), &mut m.gates.phi_bias);
                    f(&format!("layer.{i}.gates.omega"), &mut m.gates.omega);
                    f(
                        &format!("layer.{i}.gates.omega_bias"),
                        &mut m.gates.omega_bias,
                    );
                    let n = m.e();
                    for (k, e) in m.experts.iter_mut().enumerate() {
                        let tag = slot_label(k, n);
                        f(&format!("layer.{i}.expert.{tag}.a"), &mut e.a);
                        f(&format!("layer.{i}.expert.{tag}.b"), &mut e.b);
                    }
                }
            }
        }
        f("head.w", &mut self.head.w);
        f("head.bias", &mut self.head.bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_param(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// Overwrites parameter values by name; every named tensor must exist
    /// with the same shape.
    pub fn set_param_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        self.for_each_param_mut(|name, t| {
            if let Some((_, v)) = values.iter().find(|(n, _)| n == name) {
                seen += 1;
                if v.shape() != t.shape() {
                    err.get_or_insert(MoleError::dim("set_param_values", t.shape(), v.shape()));
                } else {
                    t.data_mut().copy_from_slice(v.data());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != values.len() {
            return Err(MoleError::Contract(
                "unknown parameter name in update".into(),
            ));
        }
        Ok(())
    }

    /// Sets `requires_grad` so that exactly the scope's parameters train.
    pub fn set_trainable(&mut self, scope: TrainScope) {
        self.for_each_param_mut(|name, t| {
            let on = match scope {
                TrainScope::All => true,
                TrainScope::Experts => name.contains(".expert."),
                TrainScope::Gates => name.contains(".gates."),
                TrainScope::Nothing => false,
            };
            t.set_requires_grad(on);
        });
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each_param(|n, t| {
            if t.requires_grad() {
                out.push(n.to_string());
            }
        });
        out
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, t| t.zero_grad());
    }

    /// Tensors of the frozen base path: every `base.*` tensor plus the head.
    pub fn base_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.for_each_param(|n, t| {
            if n.contains(".base.") || n.starts_with("head.") {
                ck.insert(n, t).expect("unique names");
            }
        });
        ck
    }

    /// FNV-1a over the serialized base tensors; identifies a stage-1 lineage.
    pub fn base_fingerprint(&self) -> u64 {
        self.base_checkpoint().fingerprint()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let meta = Tensor::<f64>::new([6], self.config.to_meta()).expect("meta shape");
        ck.insert("meta.model", &meta).expect("unique");
        self.for_each_param(|n, t| ck.insert(n, t).expect("unique names"));
        for (i, layer) in self.hidden.iter().enumerate() {
            let experts: Vec<(String, &LowRankExpert<T>)> = match layer {
                HiddenLayer::Plain(_) => vec![],
                HiddenLayer::Adapted { kind, expert, .. } => vec![(kind.to_string(), expert)],
                HiddenLayer::Mole(m) => m
                    .experts
                    .iter()
                    .enumerate()
                    .map(|(k, e)| (slot_label(k, m.e()), e))
                    .collect(),
            };
            for (tag, e) in experts {
                ck.put_scalar(format!("layer.{i}.expert.{tag}.scale"), e.scale())
                    .expect("unique");
                ck.put_scalar(format!("layer.{i}.expert.{tag}.rank"), e.rank() as f64)
                    .expect("unique");
            }
        }
        ck
    }

    /// Rebuilds a network; all parameters load frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = NetConfig::from_meta(ck.get::<f64>("meta.model")?.data())?;
        let load_expert = |i: usize, tag: &str| -> Result<LowRankExpert<T>> {
            let p = format!("layer.{i}.expert.{tag}");
            let e = LowRankExpert::from_parts(
                ck.get(&format!("{p}.a"))?,
                ck.get(&format!("{p}.b"))?,
                ck.get_scalar(&format!("{p}.scale"))?,
            )?;
            let stored_rank = ck.get_scalar(&format!("{p}.rank"))?;
            if stored_rank != e.rank() as f64 {
                return Err(MoleError::Contract(format!(
                    "{p}.rank = {stored_rank} disagrees with factor shapes"
                )));
            }
            Ok(e)
        };
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        for i in 0..config.hidden_layers {
            let base = BaseLinear::from_parts(
                ck.get(&format!("layer.{i}.base.w"))?,
                ck.get(&format!("layer.{i}.base.bias"))?,
            )?;
            if base.w.shape() != [config.layer_dims(i).0, config.layer_dims(i).1] {
                return Err(MoleError::Contract(format!(
                    "layer.{i}.base.w shape {:?} disagrees with meta.model",
                    base.w.shape()
                )));
            }
            let layer = if ck.contains(&format!("layer.{i}.gates.phi")) {
                let gates = GatingParams {
                    phi: ck.get(&format!("layer.{i}.gates.phi"))?,
                    phi_bias: ck.get(&format!("layer.{i}.gates.phi_bias"))?,
                    omega: ck.get(&format!("layer.{i}.gates.omega"))?,
                    omega_bias: ck.get(&format!("layer.{i}.gates.omega_bias"))?,
                };
                let experts = (0..gates.e())
                    .map(|k| load_expert(i, &slot_label(k, gates.e())))
                    .collect::<Result<Vec<_>>>()?;
                HiddenLayer::Mole(MoLELayer::from_parts(base, experts, gates)?)
            } else if let Some(kind) = ExpertKind::ALL
                .into_iter()
                .find(|k| ck.contains(&format!("layer.{i}.expert.{k}.a")))
            {
                HiddenLayer::Adapted {
                    base,
                    kind,
                    expert: load_expert(i, kind.name())?,
                }
            } else {
                HiddenLayer::Plain(base)
            };
            hidden.push(layer);
        }
        let head = BaseLinear::from_parts(ck.get("head.w")?, ck.get("head.bias")?)?;
        if head.w.shape() != [config.hidden_width, config.patch_dim()] {
            return Err(MoleError::Contract(
                "head.w shape disagrees with meta.model".into(),
            ));
        }
        let mut net = Self {
            config,
            hidden,
            head,
        };
        net.set_trainable(TrainScope::Nothing);
        Ok(net)
    }

    pub fn cast<U: Element>(&self) -> DenoiserNet<U> {
        let mut out = DenoiserNet::<U>::from_checkpoint(&recast_checkpoint::<T, U>(self))
            .expect("self-consistent network");
        let mut flags = Vec::new();
        self.for_each_param(|_, t| flags.push(t.requires_grad()));
        let mut k = 0;
        out.for_each_param_mut(|_, t| {
            t.set_requires_grad(flags[k]);
            k += 1;
        });
        out
    }
}

fn recast_checkpoint<T: Element, U: Element>(net: &DenoiserNet<T>) -> Checkpoint {
    let mut out = Checkpoint::new();
    for (name, t) in net.to_checkpoint().iter() {
        let metadata =
            name.starts_with("meta.") || name.ends_with(".scale") || name.ends_with(".rank");
        let any = match t {
            _ if metadata => t.clone(),
            AnyTensor::F32(x) => AnyTensor::from_tensor(&x.cast::<U>()),
            AnyTensor::F64(x) => AnyTensor::from_tensor(&x.cast::<U>()),
        };
        out.insert_any(name, any).expect("unique");
    }
    out
}
