//! Linear variance schedule and the forward (noising) process.
//!
//! Timesteps are 1-based: `t = 1..=T`. `t = 0` denotes the clean image and is
//! never a valid argument to the operations here.

use glyphdiff_substrate::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// 1000 steps from 1e-4 to 0.02.
    pub const FULL: ScheduleConfig = ScheduleConfig {
        steps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    /// 100 steps with both endpoints scaled by 10, so that the cumulative
    /// signal level at `T` matches the 1000-step schedule (about 4e-5)
    /// and `x_T` is close to pure noise.
    pub const DESK: ScheduleConfig = ScheduleConfig {
        steps: 100,
        beta_start: 1e-3,
        beta_end: 0.2,
    };

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t` interpolated linearly from `beta_start` at `t = 1` to
    /// `beta_end` at `t = steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config(
                "schedule.beta_start",
                format!("{beta_start} not in (0, 1)"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Sample of `q(x_t | x_0)`: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_marginal<T: Float>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        combine(x0, eps, ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// One transition of `q(x_t | x_{t-1})`: `sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps`.
    pub fn single_step<T: Float>(
        &self,
        x_prev: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(t)?;
        let b = self.beta(t);
        combine(x_prev, eps, (1.0 - b).sqrt(), b.sqrt())
    }
}

fn combine<T: Float>(x: &Tensor<T>, eps: &Tensor<T>, cx: f64, ce: f64) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::Contract(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let (cx, ce) = (T::from_f64(cx), T::from_f64(ce));
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| cx * a + ce * e)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = ScheduleConfig::FULL.build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn single_point_schedule_uses_start() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.betas(), [0.3]);
    }

    #[test]
    fn bad_bounds_name_the_field() {
        let err = NoiseSchedule::linear(10, 0.0, 0.02)
            .unwrap_err()
            .to_string();
        assert!(err.contains("beta_start"), "{err}");
        let err = NoiseSchedule::linear(10, 0.1, 0.05)
            .unwrap_err()
            .to_string();
        assert!(err.contains("beta_end"), "{err}");
        let err = NoiseSchedule::linear(0, 0.1, 0.2).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn timestep_zero_and_past_end_are_rejected() {
        let s = ScheduleConfig::DESK.build().unwrap();
        let x = Tensor::<f32>::zeros([1, 2, 2]);
        assert!(s.forward_marginal(&x, 0, &x).is_err());
        assert!(s.forward_marginal(&x, 101, &x).is_err());
        assert!(s.single_step(&x, 0, &x).is_err());
        let wrong = Tensor::<f32>::zeros([1, 2, 3]);
        assert!(s.forward_marginal(&x, 1, &wrong).is_err());
    }

    #[test]
    fn desk_schedule_ends_near_pure_noise() {
        let s = ScheduleConfig::DESK.build().unwrap();
        assert!(s.alpha_bar(100) < 1e-4);
    }
}
