//! Linear noise schedule, forward noising, guidance and the DDIM update.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;

/// Noise levels `β_1..β_T` and their cumulative products `ᾱ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdimSchedule {
    /// `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)` for `t = 1..=T`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(contract(format!(
                "linear schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got T={num_steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| beta_start + i as f64 / (num_steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(contract(format!(
                "timestep {t} outside 0..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `num_infer` evenly spaced timesteps ending at `T`, ascending.
    pub fn inference_timesteps(&self, num_infer: usize) -> Result<Vec<usize>> {
        let t = self.num_steps();
        if num_infer == 0 || num_infer > t {
            return Err(contract(format!(
                "cannot pick {num_infer} inference steps from {t}"
            )));
        }
        Ok((1..=num_infer).map(|i| i * t / num_infer).collect())
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape("q_sample noise", z0, noise)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = z0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(z, e)| sa * z + sn * e)
            .collect();
        Tensor::new(z0.shape(), data)
    }

    /// One DDIM update from `t` to `t_prev` with predicted noise `eps`.
    ///
    /// The predicted clean sample is clamped to `[−clamp, clamp]` before re-noising.
    #[allow(clippy::too_many_arguments)]
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: usize,
        eta: f64,
        fresh_noise: &Tensor,
        clamp: f64,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(contract(format!(
                "ddim step needs t > t_prev, got {t} -> {t_prev}"
            )));
        }
        same_shape("ddim noise prediction", z_t, eps)?;
        same_shape("ddim fresh noise", z_t, fresh_noise)?;
        let (a_t, a_prev) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
        let dir2 = 1.0 - a_prev - sigma * sigma;
        if dir2 < -1e-12 {
            return Err(contract(format!(
                "eta {eta} too large: sigma^2 exceeds 1 - alpha_bar at t={t_prev}"
            )));
        }
        let dir = dir2.max(0.0).sqrt();
        let (sa_t, sn_t, sa_prev) = (a_t.sqrt(), (1.0 - a_t).sqrt(), a_prev.sqrt());
        let data = z_t
            .data()
            .iter()
            .zip(eps.data())
            .zip(fresh_noise.data())
            .map(|((&z, &e), &n)| {
                let z0 = ((z - sn_t * e) / sa_t).clamp(-clamp, clamp);
                sa_prev * z0 + dir * e + sigma * n
            })
            .collect();
        Tensor::new(z_t.shape(), data)
    }
}

/// `(1+w)·ε_cond − w·ε_uncond`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, guidance: f64) -> Result<Tensor> {
    same_shape("guidance branches", eps_cond, eps_uncond)?;
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(c, u)| (1.0 + guidance) * c - guidance * u)
        .collect();
    Tensor::new(eps_cond.shape(), data)
}

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context: context.into(),
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Noise schedule and sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub infer_steps: usize,
    /// Guidance scale `w`.
    pub guidance: f64,
    pub eta: f64,
    pub clamp: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            infer_steps: 500,
            guidance: 4.0,
            eta: 0.2,
            clamp: 3.0,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<DdimSchedule> {
        DdimSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> DdimSchedule {
        SamplerConfig::default().schedule().unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = schedule();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0));
    }

    #[test]
    fn rejects_bad_range() {
        assert!(DdimSchedule::linear(1000, 0.02, 1e-4).is_err());
        assert!(DdimSchedule::linear(1000, 0.0, 0.02).is_err());
    }

    #[test]
    fn inference_subsequence() {
        let tau = schedule().inference_timesteps(500).unwrap();
        assert_eq!(tau.len(), 500);
        assert_eq!((tau[0], tau[499]), (2, 1000));
        assert!(tau.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn q_sample_known_value() {
        // ᾱ = 0.25 is not on the grid, so evaluate the formula with a one-step schedule stand-in.
        let s = DdimSchedule {
            betas: vec![0.75],
            alpha_bars: vec![0.25],
        };
        let z = s
            .q_sample(
                &Tensor::from_vec(vec![1.0]),
                1,
                &Tensor::from_vec(vec![1.0]),
            )
            .unwrap();
        assert!((z.item() - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        let z0 = Tensor::from_vec(vec![2.0, -1.0]);
        let zero = s.q_sample(&z0, 1, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(zero.data(), &[1.0, -0.5]);
        assert!(s.q_sample(&z0, 2, &z0).is_err());
    }

    #[test]
    fn guidance_examples() {
        let c = Tensor::from_vec(vec![1.0, 2.0]);
        let u = Tensor::from_vec(vec![0.0, 2.0]);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 7.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 4.0).unwrap().data()[0], 5.0);
    }

    #[test]
    fn eta_too_large_is_rejected() {
        let s = schedule();
        let z = Tensor::zeros(&[3]);
        assert!(s.ddim_step(&z, &z, 10, 8, 50.0, &z, 3.0).is_err());
        assert!(s.ddim_step(&z, &z, 8, 8, 0.0, &z, 3.0).is_err());
    }
}
