use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserNet;
use super::schedule::NoiseSchedule;
use super::EpsPredictor;
use crate::error::{MoleError, Result};
use crate::tensor::{
    finite_diff_gradcheck, Element, GradcheckReport, Gradients, Tape, Tensor, Var,
};

/// Per-timestep loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Weighting {
    Uniform,
    /// `min(SNR_t, γ) / SNR_t`
    MinSnr {
        gamma: f64,
    },
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::MinSnr { gamma: 5.0 }
    }
}

pub fn min_snr_weight(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma) / snr
}

impl Weighting {
    pub fn weight(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match *self {
            Weighting::Uniform => 1.0,
            Weighting::MinSnr { gamma } => min_snr_weight(sched.snr(t), gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Weighting::MinSnr { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                MoleError::Config(format!("min-snr gamma must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

/// One training example: clean image, timestep and the injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample<T> {
    pub x0: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
}

/// Draws a uniform timestep and Gaussian noise for each image.
pub fn draw_samples<T: Element, R: Rng + ?Sized>(
    images: &[&Tensor<f32>],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Vec<NoisedSample<T>> {
    images
        .iter()
        .map(|img| {
            let t = rng.gen_range(0..sched.num_steps());
            let eps = Tensor::randn(img.shape(), 1.0, rng);
            NoisedSample {
                x0: img.cast(),
                t,
                eps,
            }
        })
        .collect()
}

fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64
}

/// Batch mean of `w_t · mean_pixels((ε̂ - ε)²)` for any predictor.
pub fn denoise_loss<T: Element, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    batch: &[NoisedSample<T>],
    sched: &NoiseSchedule,
    weighting: Weighting,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MoleError::EmptyInput { op: "denoise_loss" });
    }
    let mut total = 0.0;
    for s in batch {
        let x_t = sched.q_sample(&s.x0, s.t, &s.eps)?;
        let pred = model.predict(&x_t, s.t, None)?;
        if pred.shape() != s.eps.shape() {
            return Err(MoleError::dim("denoise_loss", pred.shape(), s.eps.shape()));
        }
        total += weighting.weight(sched, s.t) * mse(&pred, &s.eps);
    }
    Ok(total / batch.len() as f64)
}

/// Records the batch loss on `tape` and returns the scalar loss variable.
pub fn batch_loss_on<T: Element>(
    tape: &mut Tape<T>,
    net: &DenoiserNet<T>,
    batch: &[NoisedSample<T>],
    sched: &NoiseSchedule,
    weighting: Weighting,
) -> Result<Var<T>> {
    if batch.is_empty() {
        return Err(MoleError::EmptyInput { op: "denoise_loss" });
    }
    let mut total: Option<Var<T>> = None;
    for s in batch {
        let x_t = sched.q_sample(&s.x0, s.t, &s.eps)?;
        let tokens = Var::constant(net.input_tokens(&x_t, s.t)?);
        let pred = net.forward_on(tape, &tokens, None)?;
        let target = Var::constant(net.patchify(&s.eps)?);
        let diff = tape.sub(&pred, &target)?;
        let sq = tape.mul(&diff, &diff)?;
        let per = tape.mean(&sq);
        let w = weighting.weight(sched, s.t) / batch.len() as f64;
        let term = tape.scale(&per, w);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    Ok(total.expect("nonempty batch"))
}

/// Batch loss plus gradients for every trainable parameter of `net`.
pub fn loss_and_grads<T: Element>(
    net: &DenoiserNet<T>,
    batch: &[NoisedSample<T>],
    sched: &NoiseSchedule,
    weighting: Weighting,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new();
    let loss = batch_loss_on(&mut tape, net, batch, sched, weighting)?;
    let grads = tape.backward(&loss)?;
    Ok((loss.value().data()[0].as_f64(), grads))
}

/// Finite-difference check of the batch loss against tape gradients, over
/// every trainable parameter of `net`.
pub fn gradcheck_loss(
    net: &DenoiserNet<f64>,
    batch: &[NoisedSample<f64>],
    sched: &NoiseSchedule,
    weighting: Weighting,
    h: f64,
) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_grads(net, batch, sched, weighting)?;
    let params: Vec<(String, Tensor<f64>)> = net
        .named_params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, mut t)| {
            if let Some(g) = grads.get(&n) {
                t.set_grad(g.to_vec()).expect("gradient shape");
            }
            (n, t)
        })
        .collect();
    let mut probe = net.clone();
    finite_diff_gradcheck(
        |ps| {
            probe.set_param_values(ps)?;
            denoise_loss(&probe, batch, sched, weighting)
        },
        &params,
        h,
    )
}
