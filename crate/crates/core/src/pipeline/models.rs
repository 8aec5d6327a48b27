//! Trained estimators with the statistics they need at inference, and their checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, ConditionedAutoencoder};
use crate::checkpoint::Checkpoint;
use crate::data::NormalizationStats;
use crate::diffusion::{sample_prototypes, PrototypeUnet, SamplerConfig, UnetConfig};
use crate::error::{contract, Error, Result};
use crate::estimators::{HrtfDnn, HrtfDnnConfig, ProtoDnnConfig, PrototypeDnn, PrototypeTargets};
use crate::numerics::Tensor;

/// Statistics for one trained prototype estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub anthro: NormalizationStats,
    /// Per-ear `L × D` prototype statistics.
    pub prototype: NormalizationStats,
    /// Magnitude statistics, one profile per dataset.
    pub magnitude: Vec<NormalizationStats>,
}

impl Normalizers {
    pub fn new(targets: &PrototypeTargets, magnitude: Vec<NormalizationStats>) -> Self {
        Self {
            anthro: targets.anthro_stats.clone(),
            prototype: targets.prototype_stats.clone(),
            magnitude,
        }
    }

    /// Magnitude statistics fitted on `dataset_id`.
    pub fn magnitude_profile(&self, dataset_id: &str) -> Result<&NormalizationStats> {
        self.magnitude
            .iter()
            .find(|s| s.source_dataset_ids.iter().any(|d| d == dataset_id))
            .ok_or_else(|| {
                contract(format!(
                    "no magnitude normalizer for profile {dataset_id}; available: {:?}",
                    self.profiles()
                ))
            })
    }

    pub fn profiles(&self) -> Vec<String> {
        self.magnitude
            .iter()
            .flat_map(|s| s.source_dataset_ids.clone())
            .collect()
    }
}

/// Maps one subject's two normalized anthropometry vectors to z-scored `[L, D]` prototypes.
#[derive(Clone, Debug)]
pub enum Estimator {
    ProtoDnn(PrototypeDnn),
    ProtoDm {
        net: PrototypeUnet,
        sampler: SamplerConfig,
    },
}

impl Estimator {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ProtoDnn(_) => "proto_dnn",
            Self::ProtoDm { .. } => "proto_dm",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::ProtoDnn(n) => n.config.latent_dim,
            Self::ProtoDm { net, .. } => net.config.channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Self::ProtoDnn(n) => n.parameter_count(),
            Self::ProtoDm { net, .. } => net.parameter_count(),
        }
    }

    /// Left and right prototypes; `seed` only affects the sampled estimator.
    pub fn estimate(
        &self,
        anthro_norm: [&[f64]; 2],
        frequencies_norm: &[f64],
        seed: u64,
    ) -> Result<[Tensor; 2]> {
        match self {
            Self::ProtoDnn(net) => Ok([
                net.predict(anthro_norm[0], frequencies_norm)?,
                net.predict(anthro_norm[1], frequencies_norm)?,
            ]),
            Self::ProtoDm { net, sampler } => {
                let schedule = sampler.schedule()?;
                let mut v = sample_prototypes(
                    net,
                    &schedule,
                    sampler,
                    &anthro_norm,
                    frequencies_norm,
                    seed,
                )?;
                let right = v.pop().expect("two samples");
                let left = v.pop().expect("two samples");
                Ok([left, right])
            }
        }
    }

    pub fn save(&self, normalizers: &Normalizers, path: impl AsRef<Path>) -> Result<()> {
        let mut extra = serde_json::json!({ "normalizers": normalizers });
        let ck = match self {
            Self::ProtoDnn(n) => Checkpoint::capture(self.kind(), &n.config, extra, &n.store)?,
            Self::ProtoDm { net, sampler } => {
                extra["sampler"] = serde_json::to_value(sampler)?;
                Checkpoint::capture(self.kind(), &net.config, extra, &net.store)?
            }
        };
        ck.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Normalizers)> {
        let ck = Checkpoint::load(path)?;
        let normalizers: Normalizers =
            serde_json::from_value(ck.header.extra["normalizers"].clone())?;
        let est = match ck.header.kind.as_str() {
            "proto_dnn" => {
                let mut n = PrototypeDnn::new(ck.config::<ProtoDnnConfig>()?)?;
                ck.restore_into(&mut n.store)?;
                Self::ProtoDnn(n)
            }
            "proto_dm" => {
                let mut net = PrototypeUnet::new(ck.config::<UnetConfig>()?)?;
                ck.restore_into(&mut net.store)?;
                let sampler = serde_json::from_value(ck.header.extra["sampler"].clone())?;
                Self::ProtoDm { net, sampler }
            }
            other => {
                return Err(Error::Config(format!(
                    "checkpoint holds a {other}, not a prototype estimator"
                )))
            }
        };
        Ok((est, normalizers))
    }
}

/// Frozen autoencoder checkpoint with the magnitude statistics it was trained on.
pub fn save_autoencoder(
    ae: &ConditionedAutoencoder,
    magnitude: &[NormalizationStats],
    path: impl AsRef<Path>,
) -> Result<()> {
    let extra = serde_json::json!({ "magnitude_stats": magnitude });
    Checkpoint::capture("autoencoder", &ae.config, extra, &ae.store)?.save(path)
}

/// Loads and freezes an autoencoder checkpoint.
pub fn load_autoencoder(
    path: impl AsRef<Path>,
) -> Result<(ConditionedAutoencoder, Vec<NormalizationStats>)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("autoencoder")?;
    let mut ae = ConditionedAutoencoder::new(ck.config::<AutoencoderConfig>()?)?;
    ck.restore_into(&mut ae.store)?;
    ae.freeze();
    let stats = serde_json::from_value(ck.header.extra["magnitude_stats"].clone())?;
    Ok((ae, stats))
}

/// Fixed-grid baseline with its anthropometry and magnitude statistics.
#[derive(Clone, Debug)]
pub struct TrainedHrtfDnn {
    pub net: HrtfDnn,
    pub anthro: NormalizationStats,
    pub magnitude: NormalizationStats,
}

impl TrainedHrtfDnn {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let extra =
            serde_json::json!({ "anthro_stats": self.anthro, "magnitude_stats": self.magnitude });
        Checkpoint::capture("hrtf_dnn", &self.net.config, extra, &self.net.store)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("hrtf_dnn")?;
        let mut net = HrtfDnn::new(ck.config::<HrtfDnnConfig>()?)?;
        ck.restore_into(&mut net.store)?;
        Ok(Self {
            net,
            anthro: serde_json::from_value(ck.header.extra["anthro_stats"].clone())?,
            magnitude: serde_json::from_value(ck.header.extra["magnitude_stats"].clone())?,
        })
    }
}
