use glyphdiff::sampler::{ddpm_mean, ddpm_step, ddpm_step_with, estimate_x0, gaussian};
use glyphdiff::schedule::{NoiseSchedule, ScheduleConfig};
use glyphdiff::substrate::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent oracle: prod_{i<=t} (1 - beta_i) with beta linear in i.
fn alpha_bar_oracle(steps: usize, b0: f64, b1: f64, t: usize) -> f64 {
    let mut log = 0.0f64;
    for i in 0..t {
        let beta = if steps == 1 {
            b0
        } else {
            b0 + (b1 - b0) * i as f64 / (steps - 1) as f64
        };
        log += (-beta).ln_1p();
    }
    log.exp()
}

#[test]
fn full_schedule_endpoints_and_product() {
    let s = ScheduleConfig::FULL.build().unwrap();
    assert_eq!(s.betas()[0], 1e-4);
    assert_eq!(s.betas()[999], 0.02);
    for t in [1, 2, 500, 999, 1000] {
        let want = alpha_bar_oracle(1000, 1e-4, 0.02, t);
        let rel = (s.alpha_bar(t) - want).abs() / want;
        assert!(rel < 1e-10, "t={t}: {} vs {want}", s.alpha_bar(t));
    }
}

#[test]
fn desk_schedule_reaches_noise() {
    let s = ScheduleConfig::DESK.build().unwrap();
    assert!(s.alpha_bar(100) < 1e-4);
    assert!(s.alpha_bar(1) > 0.99);
}

#[test]
fn forward_marginal_moments_match_closed_form() {
    let s = ScheduleConfig::DESK.build().unwrap();
    let x0 = Tensor::<f64>::new(vec![1, 2, 2], vec![-1.0, 1.0, 0.3, -0.6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5000;
    for t in [1, 20, 60, 100] {
        let ab = s.alpha_bar(t);
        let (mut sum, mut sq) = ([0.0; 4], 0.0);
        for _ in 0..n {
            let eps = gaussian(&[1, 2, 2], &mut rng);
            let x = s.forward_marginal(&x0, t, &eps).unwrap();
            for (i, (&v, &m)) in x.data().iter().zip(x0.data()).enumerate() {
                sum[i] += v;
                sq += (v - ab.sqrt() * m).powi(2);
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let se = ((1.0 - ab) / n as f64).sqrt();
            assert!(
                (mean - ab.sqrt() * x0.data()[i]).abs() < 4.0 * se,
                "t={t} mean {mean}"
            );
        }
        let var = sq / (4 * n) as f64;
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t} var {var}");
    }
}

#[test]
fn estimate_x0_inverts_the_forward_marginal() {
    for cfg in [ScheduleConfig::DESK, ScheduleConfig::FULL] {
        let s = cfg.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::from_fn([1, 3, 5], |i| (i as f64 * 0.37).sin());
        for t in 1..=s.steps() {
            let eps = gaussian(&[1, 3, 5], &mut rng);
            let xt = s.forward_marginal(&x0, t, &eps).unwrap();
            let back = estimate_x0(&xt, t, &eps, &s).unwrap();
            let err = back
                .data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "t={t} err {err}");
        }
    }
}

#[test]
fn one_step_schedule_round_trips() {
    let s = NoiseSchedule::linear(1, 0.05, 0.05).unwrap();
    let x0 = Tensor::<f64>::from_fn([1, 2, 3], |i| i as f64 / 3.0 - 0.8);
    let eps = gaussian(&[1, 2, 3], &mut ChaCha8Rng::seed_from_u64(3));
    let x1 = s.forward_marginal(&x0, 1, &eps).unwrap();
    let back = ddpm_step(&x1, 1, &eps, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in back.data().iter().zip(x0.data()) {
        assert!(
            (a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0),
            "{a} vs {b}"
        );
    }
}

#[test]
fn final_step_is_the_posterior_mean_bit_for_bit() {
    let s = ScheduleConfig::DESK.build().unwrap();
    let x = Tensor::<f32>::from_fn([1, 4, 4], |i| (i as f32).cos());
    let e = Tensor::<f32>::from_fn([1, 4, 4], |i| (i as f32 * 0.5).sin());
    let mean = ddpm_mean(&x, 1, &e, &s).unwrap();
    let z = Tensor::<f32>::full([1, 4, 4], 3.0);
    assert_eq!(ddpm_step_with(&x, 1, &e, &s, Some(&z)).unwrap(), mean);
    for seed in 0..4 {
        let out = ddpm_step(&x, 1, &e, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(mean.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn single_steps_compose_to_the_marginal() {
    let s = ScheduleConfig::DESK.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Tensor::<f64>::full([1, 1, 4], 0.5);
    let (k, n) = (30, 3000);
    let mut vals = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let mut x = x0.clone();
        for t in 1..=k {
            x = s
                .single_step(&x, t, &gaussian(&[1, 1, 4], &mut rng))
                .unwrap();
        }
        vals.extend_from_slice(x.data());
    }
    let ab = s.alpha_bar(k);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    assert!((mean - 0.5 * ab.sqrt()).abs() < 4.0 * ((1.0 - ab) / vals.len() as f64).sqrt());
    assert!(
        (var / (1.0 - ab) - 1.0).abs() < 0.06,
        "var {var} vs {}",
        1.0 - ab
    );
}

proptest! {
    #[test]
    fn alpha_bar_is_decreasing_in_unit_interval(steps in 1usize..300, b0 in 1e-5f64..0.05, extra in 0.0f64..0.3) {
        let s = NoiseSchedule::linear(steps, b0, b0 + extra).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < prev);
            prev = ab;
        }
    }

    #[test]
    fn marginal_with_zero_noise_scales_the_image(t in 1usize..=100, v in -1.0f64..1.0) {
        let s = ScheduleConfig::DESK.build().unwrap();
        let x0 = Tensor::<f64>::full([1, 2, 2], v);
        let x = s.forward_marginal(&x0, t, &Tensor::zeros([1, 2, 2])).unwrap();
        for &y in x.data() {
            prop_assert!((y - s.alpha_bar(t).sqrt() * v).abs() < 1e-15);
        }
    }
}
