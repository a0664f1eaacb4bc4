//! The gated mixture of low-rank experts around a linear layer.
//!
//! For tokens `x[n×d_in]` the layer computes
//!
//! ```text
//! s   = sigmoid(x·φ + φ_b)                  per-token scores, [n×e]
//! g   = sigmoid(mean_tokens(x)·ω + ω_b)     per-input scalars, [e]
//! Y_i = g_i · E_i(x ⊙ s_i)
//! x'  = x·W + b + Σ_i Y_i
//! ```
//!
//! Expert weights are independent sigmoids rather than a softmax, so one
//! expert's gate never shifts another's.

use rand::Rng;

use crate::error::{MoleError, Result};
use crate::lora::{slot_label, LowRankExpert};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLinear<T> {
    /// `[d_in × d_out]`
    pub w: Tensor<T>,
    /// `[d_out]`
    pub bias: Tensor<T>,
}

impl<T: Element> BaseLinear<T> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn([d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros([d_out]),
        }
    }

    pub fn from_parts(w: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, d_out) = w.dims2("base_linear")?;
        if bias.shape() != [d_out] {
            return Err(MoleError::dim("base_linear", w.shape(), bias.shape()));
        }
        Ok(Self { w, bias })
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn frozen(&self) -> bool {
        !self.w.requires_grad() && !self.bias.requires_grad()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.w.set_requires_grad(!frozen);
        self.bias.set_requires_grad(!frozen);
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(&format!("{prefix}.w"), &self.w);
        let b = tape.param(&format!("{prefix}.bias"), &self.bias);
        let xw = tape.matmul(x, &w)?;
        tape.add(&xw, &b)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .forward_on(&mut tape, "base", &Var::constant(x.clone()))?
            .into_value())
    }
}

/// Local (`phi`) and global (`omega`) gating layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams<T> {
    pub phi: Tensor<T>,
    pub phi_bias: Tensor<T>,
    pub omega: Tensor<T>,
    pub omega_bias: Tensor<T>,
}

impl<T: Element> GatingParams<T> {
    /// All-zero gates: every score starts at exactly 0.5.
    pub fn zeros(d_in: usize, experts: usize) -> Self {
        Self {
            phi: Tensor::zeros([d_in, experts]),
            phi_bias: Tensor::zeros([experts]),
            omega: Tensor::zeros([d_in, experts]),
            omega_bias: Tensor::zeros([experts]),
        }
    }

    pub fn e(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for t in [
            &mut self.phi,
            &mut self.phi_bias,
            &mut self.omega,
            &mut self.omega_bias,
        ] {
            t.set_requires_grad(flag);
        }
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        let e = self.e();
        for (name, t, want) in [
            ("gates.phi", &self.phi, vec![d_in, e]),
            ("gates.omega", &self.omega, vec![d_in, e]),
            ("gates.phi_bias", &self.phi_bias, vec![e]),
            ("gates.omega_bias", &self.omega_bias, vec![e]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(MoleError::Contract(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingOutputs<T> {
    /// Per-token scores, `[n × e]`.
    pub s: Tensor<T>,
    /// Per-input scalars, `[e]`.
    pub g: Tensor<T>,
}

/// What a traced forward pass observed inside one gated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    /// `[n × e]` token scores.
    pub s: Tensor<f64>,
    pub g: Vec<f64>,
    /// L2 norm of each branch output `Y_i`.
    pub branch_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoLELayer<T> {
    pub base: BaseLinear<T>,
    pub experts: Vec<LowRankExpert<T>>,
    pub gates: GatingParams<T>,
}

impl<T: Element> MoLELayer<T> {
    /// Wraps `base` with `experts`. Gates start at zero; base and experts are
    /// frozen and only the gates are left trainable.
    pub fn wrap(mut base: BaseLinear<T>, mut experts: Vec<LowRankExpert<T>>) -> Result<Self> {
        if experts.is_empty() {
            return Err(MoleError::Contract(
                "wrap_layer needs at least one expert".into(),
            ));
        }
        for e in &experts {
            if e.d_in() != base.d_in() || e.d_out() != base.d_out() {
                return Err(MoleError::dim(
                    "wrap_layer",
                    base.w.shape(),
                    &[e.d_in(), e.d_out()],
                ));
            }
        }
        base.set_frozen(true);
        for e in experts.iter_mut() {
            e.set_trainable(false);
        }
        let mut gates = GatingParams::zeros(base.d_in(), experts.len());
        gates.set_trainable(true);
        Ok(Self {
            base,
            experts,
            gates,
        })
    }

    pub fn from_parts(
        base: BaseLinear<T>,
        experts: Vec<LowRankExpert<T>>,
        gates: GatingParams<T>,
    ) -> Result<Self> {
        gates.validate(base.d_in())?;
        if gates.e() != experts.len() {
            return Err(MoleError::Contract(format!(
                "gates expect {} experts, {} attached",
                gates.e(),
                experts.len()
            )));
        }
        for e in &experts {
            if e.d_in() != base.d_in() || e.d_out() != base.d_out() {
                return Err(MoleError::dim(
                    "mole_layer",
                    base.w.shape(),
                    &[e.d_in(), e.d_out()],
                ));
            }
        }
        Ok(Self {
            base,
            experts,
            gates,
        })
    }

    pub fn e(&self) -> usize {
        self.experts.len()
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let (_, cols) = x.value().dims2("mole_layer")?;
        if cols != self.base.d_in() {
            return Err(MoleError::dim(
                "mole_layer",
                x.shape(),
                self.gates.phi.shape(),
            ));
        }
        Ok(())
    }

    pub fn local_gate_on(&self, tape: &mut Tape<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x)?;
        let phi = tape.param(&format!("{prefix}.gates.phi"), &self.gates.phi);
        let phi_b = tape.param(&format!("{prefix}.gates.phi_bias"), &self.gates.phi_bias);
        let logits = tape.matmul(x, &phi)?;
        let logits = tape.add(&logits, &phi_b)?;
        Ok(tape.sigmoid(&logits))
    }

    pub fn global_gate_on(&self, tape: &mut Tape<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x)?;
        let omega = tape.param(&format!("{prefix}.gates.omega"), &self.gates.omega);
        let omega_b = tape.param(
            &format!("{prefix}.gates.omega_bias"),
            &self.gates.omega_bias,
        );
        let pooled = tape.mean_pool_tokens(x)?;
        let pooled = tape.reshape(&pooled, [1, self.base.d_in()])?;
        let logits = tape.matmul(&pooled, &omega)?;
        let logits = tape.add(&logits, &omega_b)?;
        let g = tape.sigmoid(&logits);
        tape.reshape(&g, [self.e()])
    }

    /// `g_i · E_i(x ⊙ s_i)` with `s_i: [n×1]` and `g_i` a one-element tensor.
    pub fn expert_branch_on(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        i: usize,
        x: &Var<T>,
        s_i: &Var<T>,
        g_i: &Var<T>,
    ) -> Result<Var<T>> {
        let expert = self.experts.get(i).ok_or_else(|| {
            MoleError::Contract(format!(
                "expert index {i} out of range ({} experts)",
                self.e()
            ))
        })?;
        if g_i.value().numel() != 1 {
            return Err(MoleError::dim("expert_branch", &[1], g_i.shape()));
        }
        let masked = tape.mul(x, s_i)?;
        let tag = slot_label(i, self.e());
        let y = expert.apply_on(tape, &format!("{prefix}.expert.{tag}"), &masked)?;
        tape.mul(&y, g_i)
    }

    /// Full gated forward. When `probe` is given, the gate values and branch
    /// norms used in this pass are copied into it.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        x: &Var<T>,
        probe: Option<&mut LayerProbe>,
    ) -> Result<Var<T>> {
        self.check_input(x)?;
        let mut out = self.base.forward_on(tape, &format!("{prefix}.base"), x)?;
        let s = self.local_gate_on(tape, prefix, x)?;
        let g = self.global_gate_on(tape, prefix, x)?;
        let mut norms = Vec::with_capacity(self.e());
        for i in 0..self.e() {
            let s_i = tape.column(&s, i)?;
            let g_i = tape.select(&g, i)?;
            let y = self.expert_branch_on(tape, prefix, i, x, &s_i, &g_i)?;
            norms.push(y.value().norm());
            out = tape.add(&out, &y)?;
        }
        if let Some(p) = probe {
            *p = LayerProbe {
                s: s.value().cast(),
                g: g.value().to_f64_vec(),
                branch_norms: norms,
            };
        }
        Ok(out)
    }

    pub fn local_gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .local_gate_on(&mut tape, "layer", &Var::constant(x.clone()))?
            .into_value())
    }

    pub fn global_gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .global_gate_on(&mut tape, "layer", &Var::constant(x.clone()))?
            .into_value())
    }

    pub fn gating(&self, x: &Tensor<T>) -> Result<GatingOutputs<T>> {
        Ok(GatingOutputs {
            s: self.local_gate(x)?,
            g: self.global_gate(x)?,
        })
    }

    pub fn expert_branch(
        &self,
        i: usize,
        x: &Tensor<T>,
        s_i: &Tensor<T>,
        g_i: T,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .expert_branch_on(
                &mut tape,
                "layer",
                i,
                &Var::constant(x.clone()),
                &Var::constant(s_i.clone()),
                &Var::constant(Tensor::scalar(g_i)),
            )?
            .into_value())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .forward_on(&mut tape, "layer", &Var::constant(x.clone()), None)?
            .into_value())
    }

    pub fn forward_with_gates(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GatingOutputs<T>)> {
        Ok((self.forward(x)?, self.gating(x)?))
    }
}
