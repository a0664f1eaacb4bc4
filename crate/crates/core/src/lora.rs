//! Low-rank residual experts: `ΔW = a·bᵀ`, applied as `scale·(x·a)·bᵀ`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::tensor::{matmul_raw, transpose_raw, Element, Tape, Tensor, Var};

/// Which close-up domain an expert was trained on. The index is the
/// expert's slot inside a gated layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertKind {
    Face,
    Hand,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 2] = [ExpertKind::Face, ExpertKind::Hand];

    pub fn index(self) -> usize {
        match self {
            ExpertKind::Face => 0,
            ExpertKind::Hand => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Face => "face",
            ExpertKind::Hand => "hand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "face" => Some(ExpertKind::Face),
            "hand" => Some(ExpertKind::Hand),
            _ => None,
        }
    }
}

/// Name of expert slot `k` in a layer holding `experts` experts: the domain
/// name for the usual face/hand pair, the index otherwise.
pub fn slot_label(k: usize, experts: usize) -> String {
    match (experts, ExpertKind::ALL.get(k)) {
        (2, Some(kind)) => kind.name().to_string(),
        _ => k.to_string(),
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankExpert<T> {
    /// Down projection, `[d_in × r]`.
    pub a: Tensor<T>,
    /// Up projection, `[d_out × r]`.
    pub b: Tensor<T>,
    rank: usize,
    scale: f64,
}

impl<T: Element> LowRankExpert<T> {
    /// Gaussian `a` (std `1/√d_in`) and zero `b`, so the initial update is zero.
    pub fn init(d_in: usize, d_out: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= d_in || rank >= d_out {
            return Err(MoleError::Config(format!(
                "expert rank {rank} must satisfy 0 < rank < min(d_in={d_in}, d_out={d_out})"
            )));
        }
        check_scale(scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng);
        let b = Tensor::zeros([d_out, rank]);
        Ok(Self { a, b, rank, scale })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        let (d_in, r) = a.dims2("expert.a")?;
        let (d_out, r2) = b.dims2("expert.b")?;
        if r != r2 {
            return Err(MoleError::dim("expert", a.shape(), b.shape()));
        }
        if r >= d_in || r >= d_out {
            return Err(MoleError::Config(format!(
                "expert rank {r} must be below d_in={d_in} and d_out={d_out}"
            )));
        }
        check_scale(scale)?;
        Ok(Self {
            a,
            b,
            rank: r,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        check_scale(scale)?;
        self.scale = scale;
        Ok(())
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.a.set_requires_grad(flag);
        self.b.set_requires_grad(flag);
    }

    /// Records `scale·(x·a)·bᵀ` on the tape; `a` and `b` are registered as
    /// `<prefix>.a` / `<prefix>.b`.
    pub fn apply_on(&self, tape: &mut Tape<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let (_, cols) = x.value().dims2("expert_apply")?;
        if cols != self.d_in() {
            return Err(MoleError::dim("expert_apply", x.shape(), self.a.shape()));
        }
        let a = tape.param(&format!("{prefix}.a"), &self.a);
        let b = tape.param(&format!("{prefix}.b"), &self.b);
        let down = tape.matmul(x, &a)?;
        let bt = tape.transpose(&b)?;
        let up = tape.matmul(&down, &bt)?;
        if self.scale == 1.0 {
            Ok(up)
        } else {
            Ok(tape.scale(&up, self.scale))
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        Ok(self
            .apply_on(&mut tape, "expert", &Var::constant(x.clone()))?
            .into_value())
    }

    /// Dense `scale·a·bᵀ`, `[d_in × d_out]`.
    pub fn delta_weight(&self) -> Tensor<T> {
        let (d_in, r) = (self.d_in(), self.rank);
        let d_out = self.d_out();
        let bt = transpose_raw(self.b.data(), d_out, r);
        let mut dw = matmul_raw(self.a.data(), &bt, d_in, r, d_out);
        let s = T::from_f64_lossy(self.scale);
        for v in dw.iter_mut() {
            *v = *v * s;
        }
        Tensor::new([d_in, d_out], dw).expect("delta shape")
    }

    /// `w + scale·a·bᵀ`.
    pub fn merge_into_base(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        if w.shape() != [self.d_in(), self.d_out()] {
            return Err(MoleError::dim(
                "merge_into_base",
                w.shape(),
                &[self.d_in(), self.d_out()],
            ));
        }
        let dw = self.delta_weight();
        let data = w
            .data()
            .iter()
            .zip(dw.data())
            .map(|(&x, &d)| x + d)
            .collect();
        Tensor::new(w.shape(), data)
    }

    /// Singular values of the dense update, largest first.
    pub fn singular_values(&self) -> Vec<f64> {
        let dw = self.delta_weight();
        let m = nalgebra::DMatrix::from_row_slice(self.d_in(), self.d_out(), &dw.to_f64_vec());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    /// Count of singular values above `rel_tol·σ₁`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let sv = self.singular_values();
        let Some(&top) = sv.first() else { return 0 };
        if top == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale >= 0.0 {
        Ok(())
    } else {
        Err(MoleError::Config(format!(
            "expert scale must be finite and nonnegative, got {scale}"
        )))
    }
}
