use crate::error::{MoleError, Result};
use crate::tensor::{Element, Tensor};

/// Linear-β DDPM schedule with cumulative signal retention `ᾱ_t = Π_{s≤t} α_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(MoleError::Config(format!(
                "schedule needs T >= 2, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(MoleError::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Same schedule truncated to its first `steps` entries.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.num_steps() {
            return Err(MoleError::Config(format!(
                "cannot truncate a {}-step schedule to {steps}",
                self.num_steps()
            )));
        }
        Ok(Self::from_betas(self.betas[..steps].to_vec()))
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.num_steps() {
            Ok(())
        } else {
            Err(MoleError::Contract(format!(
                "timestep {t} out of range for T = {}",
                self.num_steps()
            )))
        }
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 - ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ab / (1.0 - ab)
    }

    /// `√ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
    pub fn q_sample<T: Element>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(MoleError::dim("q_sample", x0.shape(), eps.shape()));
        }
        let ab = self.alpha_bars[t];
        let (c0, c1) = (
            T::from_f64_lossy(ab.sqrt()),
            T::from_f64_lossy((1.0 - ab).sqrt()),
        );
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| c0 * x + c1 * e)
            .collect();
        Tensor::new(x0.shape(), data)
    }

    /// Variance of the reverse transition out of step `t` (zero at `t = 0`).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }

    /// Mean of `p(x_{t-1} | x_t)` given a noise prediction.
    pub fn reverse_mean<T: Element>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps_hat: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(t)?;
        if x_t.shape() != eps_hat.shape() {
            return Err(MoleError::dim("reverse_mean", x_t.shape(), eps_hat.shape()));
        }
        let coef = self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alphas[t].sqrt();
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| T::from_f64_lossy(inv_sqrt_alpha * (x.as_f64() - coef * e.as_f64())))
            .collect();
        Tensor::new(x_t.shape(), data)
    }

    /// Closed-form `q(x_{t-1} | x_t, x0)` mean; for `t = 0` this is `x0`.
    pub fn posterior_mean<T: Element>(
        &self,
        x_t: &Tensor<T>,
        x0: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>> {
        self.check_step(t)?;
        if x_t.shape() != x0.shape() {
            return Err(MoleError::dim("posterior_mean", x_t.shape(), x0.shape()));
        }
        if t == 0 {
            return Ok(x0.detached());
        }
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let c0 = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        let ct = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let data = x_t
            .data()
            .iter()
            .zip(x0.data())
            .map(|(&xt, &x)| T::from_f64_lossy(c0 * x.as_f64() + ct * xt.as_f64()))
            .collect();
        Tensor::new(x_t.shape(), data)
    }
}
