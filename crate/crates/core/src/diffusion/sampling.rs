use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::NoiseSchedule;
use super::EpsPredictor;
use crate::error::{MoleError, Result};
use crate::mole::LayerProbe;
use crate::tensor::{Element, Tensor};

/// Where the reverse chain begins.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleStart<T> {
    /// Pure Gaussian noise at the last timestep.
    Noise,
    /// A reference image noised to `t_start`; the chain then runs from
    /// `t_start` down to 0, keeping the reference's content regime.
    Guided {
        reference: Tensor<T>,
        t_start: usize,
    },
}

/// Gate observations from every gated layer at one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub layers: Vec<LayerProbe>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
}

/// Ancestral DDPM sampling from pure noise.
pub fn p_sample_loop<T: Element, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    seed: u64,
    trace: bool,
) -> Result<(Tensor<T>, Option<RunTrace>)> {
    p_sample_loop_from(model, sched, seed, trace, &SampleStart::Noise)
}

/// Ancestral sampling with `σ_t² = β̃_t`. All randomness comes from `seed`;
/// tracing only observes and never changes the trajectory.
pub fn p_sample_loop_from<T: Element, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    seed: u64,
    trace: bool,
    start: &SampleStart<T>,
) -> Result<(Tensor<T>, Option<RunTrace>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.image_shape();
    let (mut x, t_top) = match start {
        SampleStart::Noise => (Tensor::randn(shape, 1.0, &mut rng), sched.num_steps() - 1),
        SampleStart::Guided { reference, t_start } => {
            sched.check_step(*t_start)?;
            if reference.shape() != shape {
                return Err(MoleError::dim("p_sample_loop", reference.shape(), &shape));
            }
            let eps = Tensor::randn(shape, 1.0, &mut rng);
            (sched.q_sample(reference, *t_start, &eps)?, *t_start)
        }
    };
    let mut run = trace.then(RunTrace::default);
    for t in (0..=t_top).rev() {
        let mut probes = Vec::new();
        let eps_hat = model.predict(&x, t, run.is_some().then_some(&mut probes))?;
        if eps_hat.shape() != shape {
            return Err(MoleError::dim("p_sample_loop", eps_hat.shape(), &shape));
        }
        let mean = sched.reverse_mean(&x, t, &eps_hat)?;
        x = if t > 0 {
            let sigma = T::from_f64_lossy(sched.posterior_variance(t).sqrt());
            let z = Tensor::<T>::randn(shape, 1.0, &mut rng);
            let data = mean
                .data()
                .iter()
                .zip(z.data())
                .map(|(&m, &n)| m + sigma * n)
                .collect();
            Tensor::new(shape, data)?
        } else {
            mean
        };
        if let Some(r) = run.as_mut() {
            r.steps.push(StepRecord { t, layers: probes });
        }
    }
    Ok((x, run))
}
