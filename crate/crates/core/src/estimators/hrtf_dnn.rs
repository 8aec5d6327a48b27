use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{count_parameters, fc_block_layout, linear_layout, FcStack};
use crate::autoencoder::lsd_loss;
use crate::checkpoint::ParamLayout;
use crate::data::{
    fit_anthro_stats, fit_magnitude_stats, Ear, HrtfDataset, MergedTrainingSet, NormalizationStats,
    NUM_ANTHRO,
};
use crate::error::{contract, Error, Result};
use crate::nn::{FcBlock, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::training::{fit, holdout, TrainConfig, TrainingHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrtfDnnConfig {
    pub num_anthro: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
    pub num_positions: usize,
    pub num_freq_bins: usize,
    pub init_seed: u64,
}

impl Default for HrtfDnnConfig {
    fn default() -> Self {
        Self {
            num_anthro: NUM_ANTHRO,
            hidden1: 64,
            hidden2: 512,
            dropout: 0.5,
            num_positions: 1250,
            num_freq_bins: 128,
            init_seed: 0,
        }
    }
}

impl HrtfDnnConfig {
    /// Sized for one dataset's grid.
    pub fn for_dataset(ds: &HrtfDataset) -> Self {
        Self {
            num_positions: ds.num_positions(),
            num_freq_bins: ds.num_freq_bins(),
            ..Self::default()
        }
    }

    /// This configuration with the grid of `ds`.
    pub fn sized_for(self, ds: &HrtfDataset) -> Self {
        Self {
            num_positions: ds.num_positions(),
            num_freq_bins: ds.num_freq_bins(),
            ..self
        }
    }

    pub fn output_dim(&self) -> usize {
        self.num_positions * self.num_freq_bins
    }

    pub fn layout(&self) -> Vec<ParamLayout> {
        let mut v = fc_block_layout("block1", self.num_anthro, self.hidden1);
        v.extend(fc_block_layout("block2", self.hidden1, self.hidden2));
        v.extend(linear_layout("output", self.hidden2, self.output_dim()));
        v
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.layout())
    }
}

/// Baseline mapping one ear's anthropometry straight to `B × L` normalized magnitudes on a fixed grid.
#[derive(Clone, Debug)]
pub struct HrtfDnn {
    pub config: HrtfDnnConfig,
    pub store: ParamStore,
    stack: FcStack,
}

impl HrtfDnn {
    pub fn new(config: HrtfDnnConfig) -> Result<Self> {
        if config.hidden1 == 0
            || config.hidden2 == 0
            || config.output_dim() == 0
            || !(0.0..1.0).contains(&config.dropout)
        {
            return Err(Error::Config(
                "HRTF DNN needs positive widths and dropout in [0, 1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let b1 = FcBlock::new(
            &mut store,
            "block1",
            config.num_anthro,
            config.hidden1,
            config.dropout,
            &mut rng,
        );
        let b2 = FcBlock::new(
            &mut store,
            "block2",
            config.hidden1,
            config.hidden2,
            config.dropout,
            &mut rng,
        );
        let output = Linear::new(
            &mut store,
            "output",
            config.hidden2,
            config.output_dim(),
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            stack: FcStack {
                blocks: [b1, b2],
                output,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// `anthro[N, J]` → `[N, B·L]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, anthro: Var) -> Var {
        self.stack.forward(g, store, anthro)
    }

    /// Eval-mode normalized magnitudes, row-major `B × L`.
    pub fn predict(&self, anthro_norm: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::new(
            &[1, self.config.num_anthro],
            anthro_norm.to_vec(),
        )?);
        let y = self.forward(&mut g, &self.store, a);
        Ok(g.value(y).data().to_vec())
    }
}

/// Statistics and history from [`train_hrtf_dnn`].
#[derive(Clone, Debug)]
pub struct HrtfDnnOutcome {
    pub history: TrainingHistory,
    pub anthro_stats: NormalizationStats,
    /// One per dataset of the training set.
    pub magnitude_stats: Vec<NormalizationStats>,
}

struct EarSample {
    dataset: usize,
    subject: usize,
    ear: Ear,
    anthro_norm: Vec<f64>,
}

/// `[L]` mean and std slices of one ear.
fn ear_stats(stats: &NormalizationStats, ear: Ear, l: usize) -> (&[f64], &[f64]) {
    let r = ear.index() * l..(ear.index() + 1) * l;
    (&stats.mean[r.clone()], &stats.std[r])
}

fn lsd_batch(
    net: &HrtfDnn,
    g: &mut Graph,
    store: &ParamStore,
    set: &MergedTrainingSet,
    stats: &[NormalizationStats],
    samples: &[&EarSample],
) -> Result<Var> {
    let (b, l) = (net.config.num_positions, net.config.num_freq_bins);
    let n = samples.len();
    let mut a = Vec::with_capacity(n * NUM_ANTHRO);
    let mut truth = Vec::with_capacity(n * b * l);
    let mut mean = Vec::with_capacity(n * l);
    let mut std = Vec::with_capacity(n * l);
    for s in samples {
        a.extend_from_slice(&s.anthro_norm);
        let ds = &set.datasets[s.dataset];
        let mags = &ds.subjects[s.subject].magnitudes_db;
        for row in mags.chunks_exact(2 * l) {
            truth.extend(
                row[s.ear.index() * l..(s.ear.index() + 1) * l]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        let (m, sd) = ear_stats(&stats[s.dataset], s.ear, l);
        mean.extend_from_slice(m);
        std.extend_from_slice(sd);
    }
    let a = g.constant(Tensor::new(&[n, NUM_ANTHRO], a)?);
    let y = net.forward(g, store, a);
    let y = g.reshape(y, &[n, b, l]);
    let sd = g.constant(Tensor::new(&[n, 1, l], std)?);
    let mu = g.constant(Tensor::new(&[n, 1, l], mean)?);
    let y = g.mul(y, sd);
    let y = g.add(y, mu);
    let truth = g.constant(Tensor::new(&[n, b, l], truth)?);
    Ok(lsd_loss(g, y, truth, 2))
}

/// LSD training on `(subject, ear)` samples of a single source grid.
///
/// Refuses merged sets whose datasets use different source positions: the output
/// layer is tied to one grid.
pub fn train_hrtf_dnn(
    net: &mut HrtfDnn,
    set: &MergedTrainingSet,
    config: &TrainConfig,
) -> Result<HrtfDnnOutcome> {
    if !set.single_grid() {
        log::error!(
            "HRTF DNN cannot be trained jointly on {:?}",
            set.dataset_ids()
        );
        return Err(Error::IncompatibleGrids {
            datasets: set.dataset_ids(),
        });
    }
    let first = set
        .datasets
        .first()
        .ok_or_else(|| contract("empty training set"))?;
    if first.num_positions() != net.config.num_positions
        || first.num_freq_bins() != net.config.num_freq_bins
    {
        return Err(Error::Shape {
            context: "HRTF DNN grid".into(),
            expected: vec![net.config.num_positions, net.config.num_freq_bins],
            actual: vec![first.num_positions(), first.num_freq_bins()],
        });
    }
    let refs: Vec<&HrtfDataset> = set.datasets.iter().collect();
    let pairs: Vec<(usize, usize)> = set.members.iter().map(|m| (m.dataset, m.subject)).collect();
    let anthro_stats = fit_anthro_stats(&refs, &pairs)?;
    let magnitude_stats = set
        .datasets
        .iter()
        .enumerate()
        .map(|(d, ds)| fit_magnitude_stats(ds, &set.subjects_of(d)))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for d in 0..set.datasets.len() {
        let (t, v) = holdout(&set.subjects_of(d), config.validation_fraction, &mut rng);
        train.extend(t.into_iter().map(|s| (d, s)));
        val.extend(v.into_iter().map(|s| (d, s)));
    }
    let samples = |subjects: &[(usize, usize)]| -> Result<Vec<EarSample>> {
        let mut out = Vec::with_capacity(2 * subjects.len());
        for &(d, s) in subjects {
            for ear in Ear::BOTH {
                let alpha = set.datasets[d].subjects[s]
                    .anthropometry(ear)
                    .ok_or_else(|| contract("training subject lacks anthropometry"))?;
                out.push(EarSample {
                    dataset: d,
                    subject: s,
                    ear,
                    anthro_norm: anthro_stats.apply(alpha.values(), false)?,
                });
            }
        }
        Ok(out)
    };
    let train = samples(&train)?;
    let val = samples(&val)?;

    let shape = net.clone_structure();
    let mut store = std::mem::take(&mut net.store);
    let history = fit(
        &mut store,
        train.len(),
        config,
        |g, s, batch, _| {
            let picked: Vec<&EarSample> = batch.iter().map(|&i| &train[i]).collect();
            lsd_batch(&shape, g, s, set, &magnitude_stats, &picked)
        },
        |s| {
            if val.is_empty() {
                return Ok(None);
            }
            let mut g = Graph::inference();
            let picked: Vec<&EarSample> = val.iter().collect();
            let loss = lsd_batch(&shape, &mut g, s, set, &magnitude_stats, &picked)?;
            Ok(Some(g.value(loss).item()))
        },
    );
    net.store = store;
    Ok(HrtfDnnOutcome {
        history: history?,
        anthro_stats,
        magnitude_stats,
    })
}

impl HrtfDnn {
    /// Block structure without a copy of the (possibly very large) parameters.
    fn clone_structure(&self) -> HrtfDnn {
        HrtfDnn {
            config: self.config.clone(),
            store: ParamStore::new(),
            stack: self.stack.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_constructed_network() {
        let cfg = HrtfDnnConfig {
            num_positions: 7,
            num_freq_bins: 4,
            ..HrtfDnnConfig::default()
        };
        let net = HrtfDnn::new(cfg.clone()).unwrap();
        let layout = cfg.layout();
        for (p, e) in layout.iter().zip(net.store.entries()) {
            assert_eq!((&p.name, p.shape.as_slice()), (&e.name, e.value.shape()));
        }
        assert_eq!(net.parameter_count(), cfg.parameter_count());
        let y = net.predict(&[0.1; 23]).unwrap();
        assert_eq!(y.len(), 28);
        assert_eq!(y, net.predict(&[0.1; 23]).unwrap());
    }

    #[test]
    fn cipic_output_width() {
        assert_eq!(HrtfDnnConfig::default().output_dim(), 160_000);
    }
}
