use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear beta schedule with cumulative products. Index `t` runs from 1 to
/// `len()`; `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

/// Closed-form `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_noising(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise shape differs from z0"));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// One step of the Markov kernel `q(z_t | z_{t-1})`.
pub fn noising_step<R: Rng + ?Sized>(z_prev: &Tensor, t: usize, s: &NoiseSchedule, rng: &mut R) -> Result<Tensor> {
    s.check(t)?;
    let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    let data = z_prev
        .data()
        .iter()
        .map(|z| a * z + b * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(z_prev.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_and_constant_schedules() {
        let s = build_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.7);
        let c = 0.01;
        let s = build_schedule(50, c, c).unwrap();
        for t in [1, 7, 50] {
            assert!((s.alpha_bar(t) - (1.0 - c).powi(t as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(build_schedule(10, 0.0, 0.1).is_err());
        assert!(build_schedule(10, 0.2, 0.1).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
        assert!(build_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn noising_edge_cases() {
        let s = build_schedule(1000, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let z1 = forward_noising(&z0, 1, &eps, &s).unwrap();
        assert!(z1.max_abs_diff(&z0) <= s.beta(1).sqrt() * eps.norm() + 1e-12);
        let zero = Tensor::zeros(&[4, 3]);
        let zt = forward_noising(&zero, 500, &eps, &s).unwrap();
        assert_eq!(zt, eps.scale((1.0 - s.alpha_bar(500)).sqrt()));
        assert!(forward_noising(&z0, 0, &eps, &s).is_err());
        assert!(forward_noising(&z0, 1001, &eps, &s).is_err());
    }
}
