//! DDPM-style noise schedule and ancestral sampling for the embedding
//! refiner.
//!
//! The refiner is trained to predict the clean embedding directly, so
//! sampling follows the x0-parameterization: at each step the predicted
//! clean embedding and the current noisy state are combined through the
//! posterior mean, plus posterior noise for all but the final step.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::semantic::refiner::Refiner;

/// Linear β schedule with cumulative products precomputed. Timesteps are
/// 1-based: `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("noise schedule needs at least 1 timestep".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::Config(format!(
                "noise schedule betas must lie in [0, 1), got {beta_start}..{beta_end}"
            )));
        }
        if beta_end < beta_start {
            return Err(Error::Config(format!(
                "noise schedule must be nondecreasing, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Validation(format!(
                "timestep {t} outside schedule range 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative ᾱ_t; ᾱ_0 is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Diffuse a clean embedding to timestep `t`:
    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample(&self, x0: &Array2<f64>, noise: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        self.check_t(t)?;
        if x0.dim() != noise.dim() {
            return Err(Error::Validation(format!(
                "q_sample noise shape {:?} does not match x0 {:?}",
                noise.dim(),
                x0.dim()
            )));
        }
        let ab = self.alpha_bar(t);
        Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
    }

    /// Mean of `q(x_{t−1} | x_t, x0)`.
    pub fn posterior_mean(
        &self,
        x0: &Array2<f64>,
        x_t: &Array2<f64>,
        t: usize,
    ) -> Result<Array2<f64>> {
        self.check_t(t)?;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab_t;
        if denom < 1e-12 {
            // Degenerate (noise-free) schedule: x_t already equals √ᾱ·x0.
            return Ok(x0.clone());
        }
        let c0 = ab_prev.sqrt() * self.beta(t) / denom;
        let ct = self.alphas[t - 1].sqrt() * (1.0 - ab_prev) / denom;
        Ok(x0 * c0 + x_t * ct)
    }

    /// Standard deviation of the posterior at step `t`.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab_t;
        if denom < 1e-12 {
            0.0
        } else {
            ((1.0 - ab_prev) / denom * self.beta(t)).sqrt()
        }
    }
}

pub fn standard_normal_like(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Ancestral sampling with the x0-parameterized refiner: start from pure
/// noise at `t = T` and walk the posterior chain down to the clean
/// prediction. Deterministic given the RNG state.
pub fn sample_embedding(
    refiner: &Refiner,
    cond: &Array2<f64>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let (n, w) = (refiner.tokens, refiner.token_width);
    let mut x = standard_normal_like(n, w, rng);
    for t in (1..=schedule.timesteps()).rev() {
        let (x0, _) = refiner.forward(&x, t, cond)?;
        if t == 1 {
            return Ok(x0);
        }
        let mean = schedule.posterior_mean(&x0, &x, t)?;
        let sigma = schedule.posterior_sigma(t);
        let noise = standard_normal_like(n, w, rng);
        x = mean + noise * sigma;
    }
    Ok(x)
}
