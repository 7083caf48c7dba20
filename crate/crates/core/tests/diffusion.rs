use diffcom::diffusion::{ddim_sample, ddim_sample_clipped, gaussian, make_schedule, reverse_step_ddpm};
use diffcom::{Result, Tensor};
use proptest::prelude::*;

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |x, y| (x - y).abs()).max_abs()
}

#[test]
fn alpha_bar_matches_log_space_product() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut log_acc = 0.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        assert!((s.beta_at(t) - beta).abs() < 1e-15);
        log_acc += (1.0 - beta).ln();
        let rel = (s.alpha_bar_at(t) - log_acc.exp()).abs() / log_acc.exp();
        assert!(rel < 1e-12, "t={t}: rel err {rel}");
    }
    assert!(s.alpha_bar_at(1000) < 1e-4);
}

#[test]
fn forward_noising_moments_within_three_sigma() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let n = 20_000;
    let x0 = Tensor::from_vec(1, 4, vec![1.5, -0.7, 0.0, 3.0]);
    for &t in &[1usize, 50, 300, 1000] {
        let ab = s.alpha_bar_at(t);
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for k in 0..n {
            let eps = gaussian(1, 4, 1_000_000 * t as u64 + k as u64);
            let x = s.forward_noising(&x0, t, &eps).unwrap();
            for c in 0..4 {
                sum[c] += x.get(0, c);
                sq[c] += x.get(0, c).powi(2);
            }
        }
        for c in 0..4 {
            let mean = sum[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            let (m_exp, v_exp) = (ab.sqrt() * x0.get(0, c), 1.0 - ab);
            let m_sigma = (v_exp / n as f64).sqrt();
            let v_sigma = v_exp * (2.0 / n as f64).sqrt();
            assert!((mean - m_exp).abs() < 3.0 * m_sigma, "t={t} c={c}: mean {mean} vs {m_exp}");
            assert!((var - v_exp).abs() < 3.0 * v_sigma, "t={t} c={c}: var {var} vs {v_exp}");
        }
    }
}

#[test]
fn oracle_predictor_recovers_x0() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = gaussian(16, 5, 3).map(|v| 0.5 * v);
    let oracle = |x: &Tensor, t: usize| -> Result<Tensor> {
        let ab: f64 = s.alpha_bar_at(t);
        Ok(x.zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()))
    };
    for steps in [1, 10, 50, 1000] {
        let out = ddim_sample(&s, &oracle, (16, 5), steps, 9).unwrap();
        assert!(max_diff(&out, &x0) < 1e-6, "{steps} steps");
    }
    let eps = gaussian(16, 5, 4);
    let x1 = s.forward_noising(&x0, 1, &eps).unwrap();
    let z = gaussian(16, 5, 5);
    let back = reverse_step_ddpm(&s, &oracle, &x1, 1, Some(&z)).unwrap();
    assert!(max_diff(&back, &x0) < 1e-6);
}

#[test]
fn ddpm_mean_matches_posterior_formula() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = gaussian(4, 3, 1);
    let eps = gaussian(4, 3, 2);
    for t in [2usize, 10, 500, 1000] {
        let xt = s.forward_noising(&x0, t, &eps).unwrap();
        let (ab, ab_prev, beta, alpha) = (s.alpha_bar_at(t), s.alpha_bar_at(t - 1), s.beta_at(t), s.alpha_at(t));
        // Closed-form posterior mean of q(x_{t-1} | x_t, x0).
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let expected = x0.zip_map(&xt, |a, b| c0 * a + ct * b);
        let got = s.ddpm_mean(&xt, t, &eps).unwrap();
        assert!(max_diff(&got, &expected) < 1e-9, "t={t}");
    }
}

#[test]
fn ddim_is_bitwise_deterministic() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let w = gaussian(5, 5, 77);
    let model = |x: &Tensor, t: usize| -> Result<Tensor> { Ok(x.matmul(&w).map(|v| (v * t as f64 * 1e-3).tanh())) };
    let a = ddim_sample_clipped(&s, &model, (30, 5), 25, 123, Some(3.0)).unwrap();
    let b = ddim_sample_clipped(&s, &model, (30, 5), 25, 123, Some(3.0)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = ddim_sample_clipped(&s, &model, (30, 5), 25, 124, Some(3.0)).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn clipping_bounds_the_final_state() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let wild = |x: &Tensor, _: usize| -> Result<Tensor> { Ok(x.map(|v| -40.0 * v)) };
    let out = ddim_sample_clipped(&s, &wild, (50, 3), 20, 1, Some(2.0)).unwrap();
    assert!(out.max_abs() <= 2.0 + 1e-9);
}

#[test]
fn bad_timesteps_are_rejected() {
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let x = gaussian(2, 2, 0);
    assert!(s.forward_noising(&x, 0, &x).is_err());
    assert!(s.forward_noising(&x, 101, &x).is_err());
    assert!(s.ddim_timesteps(0).is_err());
    let zero = |x: &Tensor, _: usize| -> Result<Tensor> { Ok(x.map(|_| 0.0)) };
    assert!(ddim_sample(&s, &zero, (2, 2), 101, 0).is_err());
}

proptest! {
    #[test]
    fn ddim_grid_is_increasing_and_ends_at_t(t_max in 1usize..2000, frac in 0.0f64..1.0) {
        let s = make_schedule(t_max, 1e-4, 0.02).unwrap();
        let steps = ((frac * t_max as f64) as usize).clamp(1, t_max);
        let ts = s.ddim_timesteps(steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), t_max);
        prop_assert!(ts[0] >= 1);
        prop_assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn alpha_bar_is_decreasing(t_max in 2usize..500, b0 in 1e-5f64..1e-2, span in 0.0f64..0.5) {
        let s = make_schedule(t_max, b0, b0 + span).unwrap();
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }
}
