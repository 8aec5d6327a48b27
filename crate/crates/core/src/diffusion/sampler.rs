//! Guided DDIM sampling over a noise predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::{cfg_combine, DdimSchedule, SamplerConfig};
use crate::error::{contract, Result};
use crate::numerics::Tensor;

/// Predicts the noise in a `[D, L]` sample at timestep `t`.
pub trait NoisePredictor {
    /// `conditioned = false` selects the null conditioning branch.
    fn predict_noise(&mut self, z_t: &Tensor, t: usize, conditioned: bool) -> Result<Tensor>;
}

/// Runs the guided reverse process from seeded standard normal noise of `shape`.
///
/// With `guidance == 0` only the conditional branch is evaluated.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &mut P,
    schedule: &DdimSchedule,
    config: &SamplerConfig,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    if !(config.eta >= 0.0 && config.clamp > 0.0) {
        return Err(contract("sampler needs eta >= 0 and a positive clamp"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape, &mut rng);
    let taus = schedule.inference_timesteps(config.infer_steps)?;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps_c = predictor.predict_noise(&z, t, true)?;
        let eps = if config.guidance == 0.0 {
            eps_c
        } else {
            let eps_u = predictor.predict_noise(&z, t, false)?;
            cfg_combine(&eps_c, &eps_u, config.guidance)?
        };
        let fresh = Tensor::randn(shape, &mut rng);
        z = schedule.ddim_step(&z, &eps, t, t_prev, config.eta, &fresh, config.clamp)?;
    }
    Ok(z)
}
