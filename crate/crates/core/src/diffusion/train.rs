//! Denoising objective, the training loop and a sampler front end for the U-Net.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{ddim_sample, NoisePredictor};
use super::schedule::{DdimSchedule, SamplerConfig};
use super::unet::{Guidance, PrototypeUnet, UnetInputs};
use crate::error::{contract, Error, Result};
use crate::estimators::PrototypeTargets;
use crate::numerics::{Graph, LrScheduleKind, ParamStore, Tensor, Var};
use crate::training::{fit, TrainConfig, TrainingHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub train: TrainConfig,
    /// Probability of replacing a sample's anthropometry by the null embedding.
    pub cond_drop: f64,
    /// Sampler the model is trained for; only used for configuration checks.
    pub sampler: SamplerConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                schedule: LrScheduleKind::Cosine {
                    total_epochs: 300,
                    min_lr: 0.0,
                },
                grad_clip: Some(1.0),
                ..TrainConfig::default()
            },
            cond_drop: 0.1,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionOutcome {
    pub history: TrainingHistory,
    /// Configuration hazards noticed before training.
    pub warnings: Vec<String>,
}

/// Prototypes of `examples` transposed to `[n, D, L]`, with anthropometry `[n, J]`.
pub fn prototype_batch(targets: &PrototypeTargets, examples: &[usize]) -> Result<(Tensor, Tensor)> {
    let (l, d) = (targets.num_freq_bins, targets.latent_dim);
    let n = examples.len();
    let mut z = Vec::with_capacity(n * d * l);
    let mut a = Vec::new();
    for &e in examples {
        let ex = targets
            .examples
            .get(e)
            .ok_or_else(|| contract(format!("example {e} out of range")))?;
        for k in 0..d {
            z.extend((0..l).map(|bin| ex.target[bin * d + k]));
        }
        a.extend_from_slice(&ex.anthro_norm);
    }
    let j = a.len() / n.max(1);
    Ok((Tensor::new(&[n, d, l], z)?, Tensor::new(&[n, j], a)?))
}

/// Mean squared error between drawn noise and the U-Net's estimate of it.
///
/// Timesteps are drawn uniformly from `1..=T`; rows with `keep[i] == false` are
/// conditioned on the null embedding.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss<R: Rng>(
    net: &PrototypeUnet,
    g: &mut Graph,
    store: &ParamStore,
    schedule: &DdimSchedule,
    clean: &Tensor,
    anthro: &Tensor,
    frequencies_norm: &[f64],
    keep: &[bool],
    rng: &mut R,
) -> Result<Var> {
    let n = clean.shape()[0];
    let row = clean.len() / n.max(1);
    let noise = Tensor::randn(clean.shape(), rng);
    let timesteps: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=schedule.num_steps()))
        .collect();
    let mut noisy = Vec::with_capacity(clean.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let r = i * row..(i + 1) * row;
        let z0 = Tensor::from_vec(clean.data()[r.clone()].to_vec());
        let e = Tensor::from_vec(noise.data()[r].to_vec());
        noisy.extend(schedule.q_sample(&z0, t, &e)?.into_data());
    }
    let noisy = g.constant(Tensor::new(clean.shape(), noisy)?);
    let anthro = g.constant(anthro.clone());
    let eps = net.forward(
        g,
        store,
        UnetInputs {
            noisy,
            timesteps: &timesteps,
            frequencies_norm,
            anthro,
            guidance: Guidance::Mixed(keep),
        },
    )?;
    let target = g.constant(noise);
    let diff = g.sub(eps, target);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Trains the noise predictor on `(subject, ear)` prototypes.
pub fn train_diffusion(
    net: &mut PrototypeUnet,
    schedule: &DdimSchedule,
    train: &PrototypeTargets,
    validation: Option<&PrototypeTargets>,
    config: &DiffusionTrainConfig,
) -> Result<DiffusionOutcome> {
    if train.latent_dim != net.config.channels {
        return Err(contract(format!(
            "targets have latent dim {} but the U-Net has {} channels",
            train.latent_dim, net.config.channels
        )));
    }
    if !(0.0..=1.0).contains(&config.cond_drop) {
        return Err(Error::Config(
            "conditioning drop probability must lie in [0, 1]".into(),
        ));
    }
    let mut warnings = Vec::new();
    if config.cond_drop == 0.0 && config.sampler.guidance != 0.0 {
        let msg = format!(
            "conditioning is never dropped, so the unconditional branch stays untrained while sampling uses guidance w = {}",
            config.sampler.guidance
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let validation = validation.filter(|v| !v.is_empty());
    let freqs = train.frequencies_norm.clone();
    let shape = net.clone();
    let mut store = std::mem::take(&mut net.store);
    let val_seed = config.train.seed ^ 0xD1FF;
    let history = fit(
        &mut store,
        train.len(),
        &config.train,
        |g, s, batch, rng| {
            let (z0, a) = prototype_batch(train, batch)?;
            let keep: Vec<bool> = batch
                .iter()
                .map(|_| rng.random::<f64>() >= config.cond_drop)
                .collect();
            denoising_loss(&shape, g, s, schedule, &z0, &a, &freqs, &keep, rng)
        },
        |s| {
            let Some(v) = validation else { return Ok(None) };
            let mut rng = ChaCha8Rng::seed_from_u64(val_seed);
            let all: Vec<usize> = (0..v.len()).collect();
            let mut total = 0.0;
            for chunk in all.chunks(32) {
                let (z0, a) = prototype_batch(v, chunk)?;
                let mut g = Graph::inference();
                let keep = vec![true; chunk.len()];
                let loss = denoising_loss(
                    &shape,
                    &mut g,
                    s,
                    schedule,
                    &z0,
                    &a,
                    &v.frequencies_norm,
                    &keep,
                    &mut rng,
                )?;
                total += g.value(loss).item() * chunk.len() as f64;
            }
            Ok(Some(total / v.len() as f64))
        },
    );
    net.store = store;
    Ok(DiffusionOutcome {
        history: history?,
        warnings,
    })
}

/// Eval-mode U-Net bound to a batch of anthropometry vectors; counts its evaluations.
pub struct UnetDenoiser<'a> {
    net: &'a PrototypeUnet,
    anthro: Tensor,
    frequencies_norm: Vec<f64>,
    pub calls: usize,
}

impl<'a> UnetDenoiser<'a> {
    /// One row of `anthro_norm` per sequence to denoise.
    pub fn new(
        net: &'a PrototypeUnet,
        anthro_norm: &[&[f64]],
        frequencies_norm: &[f64],
    ) -> Result<Self> {
        let j = net.config.num_anthro;
        if anthro_norm.is_empty() || anthro_norm.iter().any(|a| a.len() != j) {
            return Err(contract(format!(
                "expected one or more anthropometry rows of width {j}"
            )));
        }
        let data = anthro_norm.iter().flat_map(|a| a.iter().copied()).collect();
        Ok(Self {
            net,
            anthro: Tensor::new(&[anthro_norm.len(), j], data)?,
            frequencies_norm: frequencies_norm.to_vec(),
            calls: 0,
        })
    }
}

impl NoisePredictor for UnetDenoiser<'_> {
    fn predict_noise(&mut self, z_t: &Tensor, t: usize, conditioned: bool) -> Result<Tensor> {
        self.calls += 1;
        let n = self.anthro.shape()[0];
        let mut g = Graph::inference();
        let noisy = g.constant(z_t.clone());
        let anthro = g.constant(self.anthro.clone());
        let eps = self.net.forward(
            &mut g,
            &self.net.store,
            UnetInputs {
                noisy,
                timesteps: &vec![t; n],
                frequencies_norm: &self.frequencies_norm,
                anthro,
                guidance: if conditioned {
                    Guidance::Conditional
                } else {
                    Guidance::Unconditional
                },
            },
        )?;
        Ok(g.value(eps).clone())
    }
}

/// Draws one z-scored `[L, D]` prototype per anthropometry row, all in one batched trajectory.
pub fn sample_prototypes(
    net: &PrototypeUnet,
    schedule: &DdimSchedule,
    sampler: &SamplerConfig,
    anthro_norm: &[&[f64]],
    frequencies_norm: &[f64],
    seed: u64,
) -> Result<Vec<Tensor>> {
    let (d, l) = (net.config.channels, frequencies_norm.len());
    let mut denoiser = UnetDenoiser::new(net, anthro_norm, frequencies_norm)?;
    let z = ddim_sample(
        &mut denoiser,
        schedule,
        sampler,
        &[anthro_norm.len(), d, l],
        seed,
    )?;
    Ok(z.data()
        .chunks_exact(d * l)
        .map(|chunk| {
            let t: Vec<f64> = (0..l)
                .flat_map(|bin| (0..d).map(move |k| chunk[k * l + bin]))
                .collect();
            Tensor::from_parts(vec![l, d], t)
        })
        .collect())
}
