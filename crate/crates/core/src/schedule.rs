//! Discrete variance-preserving noise schedule.
//!
//! Owns the per-step variance increments beta_t and their cumulative
//! signal-retention products alpha_bar_t, plus the forward perturbation
//! kernel shared by training and sampling. Immutable after construction.

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Variance-preserving schedule over discrete steps t = 1..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_min` at t=1 to `beta_max` at t=T, with
    /// alpha_bar as the running product of (1 - beta_t).
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::InvalidConfig(format!(
                "schedule needs T >= 2, got {}",
                t_max
            )));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs 0 < beta_min < beta_max < 1, got ({}, {})",
                beta_min, beta_max
            )));
        }
        let mut beta = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for t in 1..=t_max {
            let b = beta_min + (t - 1) as f64 / (t_max - 1) as f64 * (beta_max - beta_min);
            prod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Forward kernel draw: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
    pub fn forward_perturb(&self, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
        self.check_t(t)?;
        if !x0.same_shape(eps) {
            return Err(Error::shape(
                "forward_perturb",
                format!("{:?}", x0.shape()),
                format!("{:?}", eps.shape()),
            ));
        }
        let ab = self.alpha_bar[t - 1];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| sa * x + sn * e)
    }

    /// VP drift -0.5 beta_t x.
    pub fn drift(&self, x: &Image, t: usize) -> Result<Image> {
        self.check_t(t)?;
        let b = self.beta[t - 1];
        Ok(x.scale(-0.5 * b))
    }

    /// VP diffusion coefficient sqrt(beta_t).
    pub fn diffusion_coeff(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1].sqrt())
    }
}
