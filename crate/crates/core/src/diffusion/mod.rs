//! Small-scale DDPM testbed: schedule, synthetic data, patch-token
//! denoiser, weighted ε-prediction loss and ancestral sampling.

pub mod data;
pub mod dataset;
pub mod denoiser;
pub mod loss;
pub mod sampling;
pub mod schedule;

pub use data::{gen_closeup, gen_scene, SceneKind, SyntheticScene};
pub use dataset::{DataConfig, Dataset, Split};
pub use denoiser::{DenoiserNet, HiddenLayer, NetConfig, TrainScope};
pub use loss::{
    batch_loss_on, denoise_loss, draw_samples, gradcheck_loss, loss_and_grads, min_snr_weight,
    NoisedSample, Weighting,
};
pub use sampling::{p_sample_loop, p_sample_loop_from, RunTrace, SampleStart, StepRecord};
pub use schedule::NoiseSchedule;

use crate::error::Result;
use crate::mole::LayerProbe;
use crate::tensor::{Element, Tensor};

/// Anything that predicts the injected noise of a noisy image.
pub trait EpsPredictor<T: Element> {
    fn image_shape(&self) -> [usize; 2];

    /// When `probes` is given, gated layers append what they observed.
    fn predict(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Tensor<T>>;
}

impl<T: Element> EpsPredictor<T> for DenoiserNet<T> {
    fn image_shape(&self) -> [usize; 2] {
        let s = self.config().image_size;
        [s, s]
    }

    fn predict(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Tensor<T>> {
        self.predict_eps_traced(x_t, t, probes)
    }
}

/// Adapts a closure into a predictor (reference models in tests and checks).
pub struct FnPredictor<F> {
    shape: [usize; 2],
    f: F,
}

impl<F> FnPredictor<F> {
    pub fn new(shape: [usize; 2], f: F) -> Self {
        Self { shape, f }
    }
}

impl<T, F> EpsPredictor<T> for FnPredictor<F>
where
    T: Element,
    F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>,
{
    fn image_shape(&self) -> [usize; 2] {
        self.shape
    }

    fn predict(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        _probes: Option<&mut Vec<LayerProbe>>,
    ) -> Result<Tensor<T>> {
        (self.f)(x_t, t)
    }
}
