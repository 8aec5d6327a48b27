use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::PrototypeArchive;
use crate::data::{
    fit_anthro_stats, fit_normalizer, Ear, MergedTrainingSet, NormScope, NormalizationStats,
    SubjectRef, NUM_ANTHRO,
};
use crate::error::{contract, Result};
use crate::training::holdout;

/// One subject-ear: normalized anthropometry and its z-scored `L × D` prototype.
#[derive(Clone, Debug)]
pub struct EarExample {
    pub member: SubjectRef,
    pub ear: Ear,
    pub anthro_norm: Vec<f64>,
    /// Row-major `L × D`.
    pub target: Vec<f64>,
}

/// Supervised data for the prototype estimators, with the statistics used to build it.
#[derive(Clone, Debug)]
pub struct PrototypeTargets {
    /// `f / f_max` per bin.
    pub frequencies_norm: Vec<f64>,
    pub num_freq_bins: usize,
    pub latent_dim: usize,
    pub anthro_stats: NormalizationStats,
    /// Per (bin, latent) feature, pooled over subjects and ears.
    pub prototype_stats: NormalizationStats,
    pub examples: Vec<EarExample>,
}

impl PrototypeTargets {
    /// Fits anthropometry and prototype statistics on every member of `set`.
    pub fn fit(set: &MergedTrainingSet, archive: &PrototypeArchive) -> Result<Self> {
        if set.is_empty() {
            return Err(contract("no members to build prototype targets from"));
        }
        let refs: Vec<&crate::data::HrtfDataset> = set.datasets.iter().collect();
        let pairs: Vec<(usize, usize)> =
            set.members.iter().map(|m| (m.dataset, m.subject)).collect();
        let anthro_stats = fit_anthro_stats(&refs, &pairs)?;
        let mut rows = Vec::with_capacity(2 * set.len());
        for (ds, s) in set.iter() {
            for ear in Ear::BOTH {
                rows.push(
                    archive
                        .ear_prototype(&ds.dataset_id, &ds.subjects[s].subject_id, ear)?
                        .into_data(),
                );
            }
        }
        let prototype_stats = fit_normalizer(&rows, NormScope::GlobalPrototype, set.dataset_ids())?;
        Self::with_stats(set, archive, anthro_stats, prototype_stats)
    }

    /// Builds examples for `set` using already fitted statistics.
    pub fn with_stats(
        set: &MergedTrainingSet,
        archive: &PrototypeArchive,
        anthro_stats: NormalizationStats,
        prototype_stats: NormalizationStats,
    ) -> Result<Self> {
        let first = set
            .datasets
            .first()
            .ok_or_else(|| contract("empty training set"))?;
        let (l, d) = (archive.num_freq_bins, archive.latent_dim);
        if first.num_freq_bins() != l {
            return Err(contract(format!(
                "archive has {l} bins but dataset {} has {}",
                first.dataset_id,
                first.num_freq_bins()
            )));
        }
        if anthro_stats.num_features() != NUM_ANTHRO || prototype_stats.num_features() != l * d {
            return Err(contract(
                "normalizer widths do not match anthropometry and prototype sizes",
            ));
        }
        let mut examples = Vec::with_capacity(2 * set.len());
        for m in &set.members {
            let ds = &set.datasets[m.dataset];
            let subject = &ds.subjects[m.subject];
            for ear in Ear::BOTH {
                let alpha = subject.anthropometry(ear).ok_or_else(|| {
                    contract(format!(
                        "subject {} lacks anthropometry",
                        subject.subject_id
                    ))
                })?;
                let proto = archive.ear_prototype(&ds.dataset_id, &subject.subject_id, ear)?;
                examples.push(EarExample {
                    member: *m,
                    ear,
                    anthro_norm: anthro_stats.apply(alpha.values(), false)?,
                    target: prototype_stats.apply(proto.data(), false)?,
                });
            }
        }
        Ok(Self {
            frequencies_norm: first
                .frequencies_hz
                .iter()
                .map(|f| f / first.f_max_hz)
                .collect(),
            num_freq_bins: l,
            latent_dim: d,
            anthro_stats,
            prototype_stats,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Holds out `fraction` of the subjects of each dataset; both ears of a subject stay together.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut members: Vec<SubjectRef> = self.examples.iter().map(|e| e.member).collect();
        members.dedup();
        let mut datasets: Vec<usize> = members.iter().map(|m| m.dataset).collect();
        datasets.sort_unstable();
        datasets.dedup();
        let mut val = Vec::new();
        for d in datasets {
            let of_d: Vec<SubjectRef> =
                members.iter().copied().filter(|m| m.dataset == d).collect();
            val.extend(holdout(&of_d, fraction, &mut rng).1);
        }
        let pick = |keep_val: bool| Self {
            examples: self
                .examples
                .iter()
                .filter(|e| val.contains(&e.member) == keep_val)
                .cloned()
                .collect(),
            ..self.without_examples()
        };
        (pick(false), pick(true))
    }

    fn without_examples(&self) -> Self {
        Self {
            frequencies_norm: self.frequencies_norm.clone(),
            num_freq_bins: self.num_freq_bins,
            latent_dim: self.latent_dim,
            anthro_stats: self.anthro_stats.clone(),
            prototype_stats: self.prototype_stats.clone(),
            examples: Vec::new(),
        }
    }
}
