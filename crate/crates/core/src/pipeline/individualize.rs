//! Anthropometry → prototypes → decoder → dB magnitudes on any source grid.

use crate::autoencoder::{ConditionedAutoencoder, TokenGrid};
use crate::data::{AnthropometricVector, HrtfDataset};
use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;

use super::minphase::min_phase_reconstruct;
use super::models::{Estimator, Normalizers};

/// Source grid and frequency grid to render on.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    pub positions: Vec<[f32; 3]>,
    pub source_distance_m: f64,
    pub frequencies_hz: Vec<f64>,
    pub f_max_hz: f64,
}

impl TargetGrid {
    pub fn of_dataset(ds: &HrtfDataset) -> Self {
        Self {
            positions: ds.positions.clone(),
            source_distance_m: ds.source_distance_m,
            frequencies_hz: ds.frequencies_hz.clone(),
            f_max_hz: ds.f_max_hz,
        }
    }

    pub fn frequencies_norm(&self) -> Vec<f64> {
        self.frequencies_hz
            .iter()
            .map(|f| f / self.f_max_hz)
            .collect()
    }

    pub fn tokens(&self) -> Result<TokenGrid> {
        TokenGrid::from_positions(
            &self.positions,
            self.source_distance_m,
            &self.frequencies_hz,
            self.f_max_hz,
        )
    }
}

/// An estimator and the frozen decoder it was trained against.
#[derive(Clone, Debug)]
pub struct Individualizer {
    pub estimator: Estimator,
    pub decoder: ConditionedAutoencoder,
    pub normalizers: Normalizers,
    /// Base seed of sampled estimates.
    pub seed: u64,
}

impl Individualizer {
    pub fn new(
        estimator: Estimator,
        decoder: ConditionedAutoencoder,
        normalizers: Normalizers,
        seed: u64,
    ) -> Result<Self> {
        let d = decoder.latent_dim();
        if estimator.latent_dim() != d {
            return Err(contract(format!(
                "estimator predicts {}-dimensional prototypes but the decoder expects {d}",
                estimator.latent_dim()
            )));
        }
        if normalizers.prototype.num_features() % d != 0 {
            return Err(contract(
                "prototype normalizer width is not a multiple of the latent dimension",
            ));
        }
        Ok(Self {
            estimator,
            decoder,
            normalizers,
            seed,
        })
    }

    pub fn num_freq_bins(&self) -> usize {
        self.normalizers.prototype.num_features() / self.decoder.latent_dim()
    }

    /// Prototype `[2L, D]` in the decoder's latent units, left ear first.
    pub fn prototype(
        &self,
        alpha: [&AnthropometricVector; 2],
        frequencies_norm: &[f64],
        seed: u64,
    ) -> Result<Tensor> {
        let l = self.num_freq_bins();
        if frequencies_norm.len() != l {
            return Err(Error::Shape {
                context: "individualization frequency grid".into(),
                expected: vec![l],
                actual: vec![frequencies_norm.len()],
            });
        }
        let left = self.normalizers.anthro.apply(alpha[0].values(), false)?;
        let right = self.normalizers.anthro.apply(alpha[1].values(), false)?;
        let [pl, pr] = self
            .estimator
            .estimate([&left, &right], frequencies_norm, seed)?;
        let mut rows = self.normalizers.prototype.apply(pl.data(), true)?;
        rows.extend(self.normalizers.prototype.apply(pr.data(), true)?);
        Tensor::new(&[2 * l, self.decoder.latent_dim()], rows)
    }

    /// `[B', 2L]` dB magnitudes on `grid`, de-normalized with the `profile` dataset statistics.
    pub fn individualize(
        &self,
        alpha: [&AnthropometricVector; 2],
        grid: &TargetGrid,
        profile: &str,
        seed: u64,
    ) -> Result<Tensor> {
        let stats = self.normalizers.magnitude_profile(profile)?;
        let proto = self.prototype(alpha, &grid.frequencies_norm(), seed)?;
        let y = self.decoder.decode(&proto, &grid.tokens()?)?;
        let shape = y.shape().to_vec();
        Tensor::new(&shape, stats.apply(y.data(), true)?)
    }
}

/// Minimum-phase HRIRs of `[B, 2L]` dB magnitudes, laid out per position as left then
/// right, `n_fft` taps each. Both ears start at tap 0 (no interaural delay).
pub fn hrirs(magnitudes_db: &Tensor, n_fft: usize) -> Result<Vec<f32>> {
    let s = magnitudes_db.shape();
    if s.len() != 2 || s[1] % 2 != 0 {
        return Err(contract(format!("expected [B, 2L] magnitudes, got {s:?}")));
    }
    let l = s[1] / 2;
    let mut out = Vec::with_capacity(s[0] * 2 * n_fft);
    for ear in magnitudes_db.data().chunks_exact(l) {
        out.extend(min_phase_reconstruct(ear, n_fft)?.iter().map(|&v| v as f32));
    }
    Ok(out)
}
