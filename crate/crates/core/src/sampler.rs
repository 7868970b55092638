//! Ancestral DDPM sampling from `x_T ~ N(0, I)` down to `x_0`.

use glyphdiff_substrate::{Float, Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ConditioningMode;
use crate::denoiser::Denoiser;
use crate::font::Font;
use crate::image::GrayImage;
use crate::par::{self, Execution};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

fn check_shapes<T: Float>(x_t: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<()> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Contract(format!(
            "noise estimate {:?} differs from x_t {:?}",
            eps_hat.shape(),
            x_t.shape()
        )));
    }
    Ok(())
}

/// `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn estimate_x0<T: Float>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_shapes(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (ce, inv) = (T::from_f64((1.0 - ab).sqrt()), T::from_f64(1.0 / ab.sqrt()));
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - ce * e) * inv)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`.
pub fn ddpm_mean<T: Float>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    check_shapes(x_t, eps_hat)?;
    let ce = T::from_f64(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv = T::from_f64(1.0 / sched.alpha(t).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - ce * e) * inv)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// One reverse transition with explicit noise `z` (ignored at `t = 1`),
/// using `sigma_t^2 = beta_t`.
pub fn ddpm_step_with<T: Float>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    z: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut mean = ddpm_mean(x_t, t, eps_hat, sched)?;
    if t > 1 {
        if let Some(z) = z {
            check_shapes(x_t, z)?;
            let sigma = T::from_f64(sched.beta(t).sqrt());
            for (m, &n) in mean.data_mut().iter_mut().zip(z.data()) {
                *m += sigma * n;
            }
        }
    }
    Ok(mean)
}

/// One reverse transition; `z ~ N(0, I)` is drawn from `rng` only when `t > 1`.
pub fn ddpm_step<T: Float, R: Rng>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    if t == 1 {
        return ddpm_step_with(x_t, t, eps_hat, sched, None);
    }
    let z = gaussian(x_t.shape(), rng);
    ddpm_step_with(x_t, t, eps_hat, sched, Some(&z))
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian<T: Float, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64(rng.sample::<f64, _>(StandardNormal))
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRequest {
    pub text: String,
    pub writer: usize,
    pub seed: u64,
}

/// Conditioning channels to zero out during generation, for liveness probes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Probe {
    pub zero_text: bool,
    pub zero_style: bool,
    pub zero_printed: bool,
}

/// A frozen model ready to sample from.
pub struct Generator<'a> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamSet<f32>,
    pub schedule: &'a NoiseSchedule,
    pub mode: ConditioningMode,
    pub font: &'a Font,
}

impl Generator<'_> {
    pub fn generate(&self, req: &SampleRequest) -> Result<GrayImage> {
        self.generate_with(req, Probe::default(), |_| {})
    }

    /// Generate with selected conditioning channels zeroed; `visit` sees
    /// every timestep as it is processed.
    pub fn generate_with(
        &self,
        req: &SampleRequest,
        probe: Probe,
        mut visit: impl FnMut(usize),
    ) -> Result<GrayImage> {
        let cfg = self.denoiser.config();
        let canvas = cfg.canvas;
        let n_styles = cfg.n_styles;
        if req.writer >= n_styles {
            return Err(Error::WriterOutOfRange {
                id: req.writer,
                n_styles,
            });
        }
        let tokens = cfg.vocab.tokenize(&req.text)?;
        let printed = self.mode.printed(&req.text, canvas, self.font)?;
        let printed: Tensor<f32> = if probe.zero_printed {
            Tensor::zeros([1, canvas.height, canvas.width])
        } else {
            printed.to_tensor()
        };
        let text = {
            let mut g = Graph::with_params(self.params);
            let v = self.denoiser.encode_text(&mut g, &tokens)?;
            let enc = g.value(v).clone();
            if probe.zero_text {
                Tensor::zeros(enc.shape().to_vec())
            } else {
                enc
            }
        };
        let mask = tokens.key_mask();
        let writer = (!probe.zero_style).then_some(req.writer);

        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut x: Tensor<f32> = gaussian(&[1, canvas.height, canvas.width], &mut rng);
        for t in (1..=self.schedule.steps()).rev() {
            visit(t);
            let mut g = Graph::with_params(self.params);
            let xv = g.constant(x.clone());
            let cv = g.constant(printed.clone());
            let tv = g.constant(text.clone());
            let out = self
                .denoiser
                .forward(&mut g, xv, cv, t, writer, tv, &mask, None)?;
            let eps_hat = g.value(out).clone();
            drop(g);
            x = ddpm_step(&x, t, &eps_hat, self.schedule, &mut rng)?;
        }
        GrayImage::from_clamped(canvas.width, canvas.height, x.data())
    }

    /// Independent generations, in request order.
    pub fn generate_batch(
        &self,
        reqs: &[SampleRequest],
        exec: Execution,
    ) -> Result<Vec<GrayImage>> {
        par::try_map(exec, reqs, |r| self.generate(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    #[test]
    fn final_step_adds_no_noise() {
        let s = ScheduleConfig::DESK.build().unwrap();
        let x = Tensor::<f32>::from_fn([1, 2, 3], |i| i as f32 * 0.1);
        let e = Tensor::<f32>::from_fn([1, 2, 3], |i| 0.5 - i as f32 * 0.2);
        let a = ddpm_step(&x, 1, &e, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ddpm_step(&x, 1, &e, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let c = ddpm_step(&x, 2, &e, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = ddpm_step(&x, 2, &e, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn out_of_range_steps_are_rejected() {
        let s = ScheduleConfig::DESK.build().unwrap();
        let x = Tensor::<f32>::zeros([1, 1, 1]);
        assert!(ddpm_step(&x, 0, &x, &s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(estimate_x0(&x, 101, &x, &s).is_err());
    }
}
