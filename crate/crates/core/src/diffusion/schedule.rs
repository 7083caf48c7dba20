use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-β noise schedule. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid beta range [{beta_start}, {beta_end}]")));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| if t_max == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64 })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn forward_noising(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!("x0 is {:?} but eps is {:?}", x0.shape(), eps.shape())));
        }
        let ab = self.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// DDPM posterior mean for a predicted noise.
    pub fn ddpm_mean(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (beta, alpha, ab) = (self.beta_at(t), self.alpha_at(t), self.alpha_bar_at(t));
        let c = beta / (1.0 - ab).sqrt();
        let s = 1.0 / alpha.sqrt();
        Ok(x_t.zip_map(eps_hat, |x, e| s * (x - c * e)))
    }

    /// Evenly spaced sub-schedule `round(i·T/s)` for `i = 1..=s`, ascending.
    pub fn ddim_timesteps(&self, s: usize) -> Result<Vec<usize>> {
        if s == 0 || s > self.steps() {
            return Err(Error::InvalidArgument(format!("DDIM steps {s} outside [1, {}]", self.steps())));
        }
        let t = self.steps() as f64;
        Ok((1..=s).map(|i| ((i as f64 * t / s as f64).round() as usize).max(1)).collect())
    }
}

/// Anything that predicts `ε` from `(x_t, t)`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// One ancestral step; `z = None` adds no noise. At `t = 1` noise is never added.
pub fn reverse_step_ddpm(
    sched: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let eps = model.predict(x_t, t)?;
    let mut mean = sched.ddpm_mean(x_t, t, &eps)?;
    if let (Some(z), true) = (z, t > 1) {
        if z.shape() != mean.shape() {
            return Err(Error::Shape("noise shape does not match state".into()));
        }
        let sb = sched.beta_at(t).sqrt();
        mean = mean.zip_map(z, |m, n| m + sb * n);
    }
    Ok(mean)
}

/// Seeded standard-normal tensor.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Deterministic DDIM (`η = 0`) over `steps` evenly spaced timesteps.
pub fn ddim_sample(
    sched: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    shape: (usize, usize),
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    ddim_sample_clipped(sched, model, shape, steps, seed, None)
}

/// DDIM with the `x0` estimate clamped to `±clip` at every step; the noise
/// estimate is made consistent with the clamped `x0`.
pub fn ddim_sample_clipped(
    sched: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    shape: (usize, usize),
    steps: usize,
    seed: u64,
    clip: Option<f64>,
) -> Result<Tensor> {
    let ts = sched.ddim_timesteps(steps)?;
    let mut x = gaussian(shape.0, shape.1, seed);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = model.predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::Shape("noise prediction shape differs from state".into()));
        }
        let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(prev));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x.zip_map(&eps, |xv, e| {
            let mut x0 = (xv - sb * e) / sa;
            let mut e = e;
            if let Some(c) = clip {
                if x0.abs() > c {
                    x0 = x0.clamp(-c, c);
                    e = (xv - sa * x0) / sb;
                }
            }
            pa * x0 + pb * e
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar_at(1) - 0.9999).abs() < 1e-15);
        assert!((s.beta_at(1000) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let one = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(one.alpha_bar_at(1), 0.7);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn ddim_grid() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!((ts[0], *ts.last().unwrap(), ts.len()), (20, 1000, 50));
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn oracle_step_at_one_inverts_noising() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = gaussian(5, 4, 1);
        let eps = gaussian(5, 4, 2);
        let x1 = s.forward_noising(&x0, 1, &eps).unwrap();
        let e2 = eps.clone();
        let oracle = move |_: &Tensor, _: usize| Ok(e2.clone());
        let z = gaussian(5, 4, 3);
        let back = reverse_step_ddpm(&s, &oracle, &x1, 1, Some(&z)).unwrap();
        assert!(back.zip_map(&x0, |a, b| (a - b).abs()).max_abs() < 1e-6);
    }
}
