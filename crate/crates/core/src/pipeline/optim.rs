//! AdamW and Lion updates over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserNet;
use crate::error::{MoleError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Lion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimHyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adamw => Self {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            OptimizerKind::Lion => Self {
                beta1: 0.9,
                beta2: 0.99,
                eps: 0.0,
                weight_decay: 0.0,
            },
        }
    }
}

/// Anything exposing named, mutable parameter tensors.
pub trait Parameters<T> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

impl<T: Element> Parameters<T> for DenoiserNet<T> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.for_each_param_mut(|n, t| f(n, t));
    }
}

impl<T: Element> Parameters<T> for Vec<(String, Tensor<T>)> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.iter_mut() {
            f(n, t);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub kind: OptimizerKind,
    pub hyper: OptimHyper,
    moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl TrainState {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper) -> Self {
        Self {
            kind,
            hyper,
            moments: BTreeMap::new(),
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Names that currently hold moment buffers.
    pub fn tracked_params(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// Applies one update to every parameter with `requires_grad`, reading the
/// gradient from its grad slot. Parameters without `requires_grad` are not
/// touched.
pub fn optimizer_step<T: Element, P: Parameters<T> + ?Sized>(
    state: &mut TrainState,
    params: &mut P,
    lr: f64,
) -> Result<()> {
    let mut missing = None;
    params.visit_params_mut(&mut |name, t| {
        if t.requires_grad() && t.grad().is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(MoleError::Contract(format!(
            "no gradient for trainable parameter `{name}`"
        )));
    }

    state.step += 1;
    let step = state.step as i32;
    let h = state.hyper;
    let kind = state.kind;
    let moments = &mut state.moments;
    params.visit_params_mut(&mut |name, t| {
        if !t.requires_grad() {
            return;
        }
        let grad: Vec<f64> = t
            .grad()
            .expect("checked above")
            .iter()
            .map(|g| g.as_f64())
            .collect();
        let mo = moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: match kind {
                OptimizerKind::Adamw => vec![0.0; grad.len()],
                OptimizerKind::Lion => Vec::new(),
            },
        });
        match kind {
            OptimizerKind::Adamw => {
                let bc1 = 1.0 - h.beta1.powi(step);
                let bc2 = 1.0 - h.beta2.powi(step);
                for (k, p) in t.data_mut().iter_mut().enumerate() {
                    let g = grad[k];
                    mo.m[k] = h.beta1 * mo.m[k] + (1.0 - h.beta1) * g;
                    mo.v[k] = h.beta2 * mo.v[k] + (1.0 - h.beta2) * g * g;
                    let m_hat = mo.m[k] / bc1;
                    let v_hat = mo.v[k] / bc2;
                    let mut x = p.as_f64();
                    x -= lr * h.weight_decay * x;
                    x -= lr * m_hat / (v_hat.sqrt() + h.eps);
                    *p = T::from_f64_lossy(x);
                }
            }
            OptimizerKind::Lion => {
                for (k, p) in t.data_mut().iter_mut().enumerate() {
                    let g = grad[k];
                    let c = h.beta1 * mo.m[k] + (1.0 - h.beta1) * g;
                    let x = p.as_f64();
                    *p = T::from_f64_lossy(x - lr * (sign(c) + h.weight_decay * x));
                    mo.m[k] = h.beta2 * mo.m[k] + (1.0 - h.beta2) * g;
                }
            }
        }
    });
    Ok(())
}
