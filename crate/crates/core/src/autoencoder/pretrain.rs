//! Autoencoder pretraining on one or more datasets with native source grids.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lsd, lsd_loss, ConditionedAutoencoder, PrototypeArchive, TokenGrid};
use crate::data::{
    fit_magnitude_stats, HrtfDataset, MergedTrainingSet, NormalizationStats, SubjectRef,
};
use crate::error::{contract, Result};
use crate::numerics::{clip_global_norm, AdamW, Graph, LrSchedule, Tensor, Var};
use crate::training::{
    batches, check_loss, holdout, EarlyStopping, EpochRecord, StopReason, TrainConfig,
    TrainingHistory,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Random subset of source positions per step; `None` uses the whole grid.
    pub positions_per_step: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            positions_per_step: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub history: TrainingHistory,
    /// Magnitude statistics, one per dataset of the training set.
    pub magnitude_stats: Vec<NormalizationStats>,
    /// Prototypes of every member subject, computed with the frozen encoder.
    pub archive: PrototypeArchive,
    /// Full-grid LSD (dB) over the subjects that were trained on.
    pub train_lsd: f64,
    pub validation_members: Vec<SubjectRef>,
}

/// A dataset's grid, statistics and per-subject normalized magnitudes.
pub(crate) struct PreparedDataset<'a> {
    pub dataset: &'a HrtfDataset,
    pub grid: TokenGrid,
    pub stats: NormalizationStats,
    normalized: HashMap<usize, Vec<f64>>,
}

impl<'a> PreparedDataset<'a> {
    pub fn new(
        dataset: &'a HrtfDataset,
        stats: NormalizationStats,
        subjects: &[usize],
    ) -> Result<Self> {
        let mut normalized = HashMap::new();
        for &s in subjects {
            normalized.insert(s, normalize_subject(dataset, &stats, s)?);
        }
        Ok(Self {
            dataset,
            grid: TokenGrid::from_dataset(dataset)?,
            stats,
            normalized,
        })
    }

    pub fn normalized(&self, s: usize) -> &[f64] {
        &self.normalized[&s]
    }
}

pub(crate) fn normalize_subject(
    ds: &HrtfDataset,
    stats: &NormalizationStats,
    s: usize,
) -> Result<Vec<f64>> {
    let raw: Vec<f64> = ds.subjects[s]
        .magnitudes_db
        .iter()
        .map(|&v| v as f64)
        .collect();
    stats.apply(&raw, false)
}

/// Builds the training loss for `subjects` of one dataset restricted to `positions`.
fn batch_loss(
    ae: &ConditionedAutoencoder,
    g: &mut Graph,
    prep: &PreparedDataset,
    subjects: &[usize],
    positions: &[usize],
) -> Result<Var> {
    let l = prep.grid.num_freq_bins;
    let rows = 2 * l;
    let (p, s) = (positions.len(), subjects.len());
    let sub = prep.grid.positions(positions);
    let mut x = Vec::with_capacity(p * rows * s);
    let mut truth = Vec::with_capacity(p * rows * s);
    for &b in positions {
        for t in 0..rows {
            for &si in subjects {
                x.push(prep.normalized(si)[b * rows + t]);
                truth.push(prep.dataset.subjects[si].magnitudes_db[b * rows + t] as f64);
            }
        }
    }
    let cond = g.constant(sub.conditioning);
    let x = g.constant(Tensor::new(&[p * rows, s, 1], x)?);
    let truth = g.constant(Tensor::new(&[p, 2, l, s], truth)?);
    let z = ae.encode_tokens(g, cond, x);
    let proto = ae.pool_tokens(g, z, p);
    let y = ae.decode_tokens(g, cond, proto, p);
    let std = g.constant(Tensor::new(&[rows, 1], prep.stats.std.clone())?);
    let mean = g.constant(Tensor::new(&[rows, 1], prep.stats.mean.clone())?);
    let y = g.mul(y, std);
    let y = g.add(y, mean);
    let y = g.reshape(y, &[p, 2, l, s]);
    Ok(lsd_loss(g, y, truth, 2))
}

/// Per-subject full-grid reconstruction LSD (dB): encode, pool, decode on the same grid.
pub fn reconstruction_lsd(
    ae: &ConditionedAutoencoder,
    ds: &HrtfDataset,
    stats: &NormalizationStats,
    subjects: &[usize],
) -> Result<Vec<f64>> {
    let grid = TokenGrid::from_dataset(ds)?;
    let norm: Vec<Vec<f64>> = subjects
        .iter()
        .map(|&s| normalize_subject(ds, stats, s))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = norm.iter().map(|v| v.as_slice()).collect();
    let protos = ae.prototypes(&refs, &grid)?;
    let proto_refs: Vec<&Tensor> = protos.iter().collect();
    let decoded = ae.decode_many(&proto_refs, &grid)?;
    subjects
        .iter()
        .zip(decoded)
        .map(|(&s, y)| {
            let pred = stats.apply(&y, true)?;
            let truth: Vec<f64> = ds.subjects[s]
                .magnitudes_db
                .iter()
                .map(|&v| v as f64)
                .collect();
            lsd(&pred, &truth, ds.num_freq_bins())
        })
        .collect()
}

fn mean_lsd(
    ae: &ConditionedAutoencoder,
    set: &MergedTrainingSet,
    stats: &[NormalizationStats],
    members: &[SubjectRef],
) -> Result<f64> {
    let mut total = 0.0;
    for (d, ds) in set.datasets.iter().enumerate() {
        let subs: Vec<usize> = members
            .iter()
            .filter(|m| m.dataset == d)
            .map(|m| m.subject)
            .collect();
        if !subs.is_empty() {
            total += reconstruction_lsd(ae, ds, &stats[d], &subs)?
                .iter()
                .sum::<f64>();
        }
    }
    Ok(total / members.len() as f64)
}

/// Trains `ae` on every member of `set`, then freezes it and archives all members' prototypes.
pub fn pretrain_autoencoder(
    ae: &mut ConditionedAutoencoder,
    set: &MergedTrainingSet,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let tc = &config.train;
    tc.validate()?;
    if ae.is_frozen() {
        return Err(contract("autoencoder is frozen"));
    }
    if set.is_empty() {
        return Err(contract("pretraining set is empty"));
    }
    let l = set.datasets[0].num_freq_bins();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);

    let mut stats = Vec::with_capacity(set.datasets.len());
    let mut prepared = Vec::with_capacity(set.datasets.len());
    let mut train_by_ds = Vec::with_capacity(set.datasets.len());
    let mut val_members = Vec::new();
    for (d, ds) in set.datasets.iter().enumerate() {
        let subs = set.subjects_of(d);
        if subs.is_empty() {
            stats.push(NormalizationStats {
                scope: crate::data::NormScope::PerDatasetMagnitude,
                mean: vec![0.0; 2 * l],
                std: vec![1.0; 2 * l],
                source_dataset_ids: vec![ds.dataset_id.clone()],
            });
            prepared.push(None);
            train_by_ds.push(Vec::new());
            continue;
        }
        let st = fit_magnitude_stats(ds, &subs)?;
        let (train, val) = holdout(&subs, tc.validation_fraction, &mut rng);
        val_members.extend(val.iter().map(|&s| SubjectRef {
            dataset: d,
            subject: s,
        }));
        prepared.push(Some(PreparedDataset::new(ds, st.clone(), &subs)?));
        stats.push(st);
        train_by_ds.push(train);
    }
    let train_members: Vec<SubjectRef> = train_by_ds
        .iter()
        .enumerate()
        .flat_map(|(d, subs)| {
            subs.iter().map(move |&s| SubjectRef {
                dataset: d,
                subject: s,
            })
        })
        .collect();

    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);
    let mut sched = LrSchedule::new(tc.schedule, tc.learning_rate)?;
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    'outer: for epoch in 0..tc.max_epochs {
        let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
        for (d, subs) in train_by_ds.iter().enumerate() {
            for batch in batches(subs.len(), tc.batch_size, &mut rng) {
                plan.push((d, batch.into_iter().map(|i| subs[i]).collect()));
            }
        }
        rand::seq::SliceRandom::shuffle(plan.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (d, subjects) in plan {
            let prep = prepared[d].as_ref().expect("dataset with members");
            let b = prep.grid.num_positions;
            let positions: Vec<usize> = match config.positions_per_step {
                Some(p) if p < b => {
                    let mut v = sample(&mut rng, b, p).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..b).collect(),
            };
            let mut g =
                Graph::training(tc.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let loss = batch_loss(ae, &mut g, prep, &subjects, &positions)?;
            let value = g.value(loss).item();
            check_loss(step, value)?;
            let grads = g.backward(loss)?;
            let mut grads = grads.for_store(&ae.store);
            if let Some(c) = tc.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(&mut ae.store, &grads)?;
            step += 1;
            loss_sum += value * subjects.len() as f64;
            count += subjects.len();
            if tc.max_steps.is_some_and(|m| step >= m) {
                stop_reason = StopReason::MaxSteps;
                record_epoch(
                    &mut epochs,
                    &mut stopper,
                    ae,
                    set,
                    &stats,
                    &val_members,
                    epoch,
                    loss_sum / count as f64,
                    opt.learning_rate,
                )?;
                break 'outer;
            }
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let stop = record_epoch(
            &mut epochs,
            &mut stopper,
            ae,
            set,
            &stats,
            &val_members,
            epoch,
            train_loss,
            opt.learning_rate,
        )?;
        log::info!(
            "ae epoch {epoch}: train lsd {train_loss:.4} dB, lr {:.2e}",
            opt.learning_rate
        );
        if tc.target_train_loss.is_some_and(|t| train_loss < t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
        let monitored = epochs
            .last()
            .map(|e: &EpochRecord| e.val_loss.unwrap_or(e.train_loss))
            .unwrap_or(train_loss);
        opt.learning_rate = sched.step(epoch, monitored, opt.learning_rate);
    }
    if stop_reason != StopReason::TargetReached && stop_reason != StopReason::MaxSteps {
        stopper.restore_best(&mut ae.store)?;
    }
    ae.freeze();

    let train_lsd = mean_lsd(ae, set, &stats, &train_members)?;
    let mut archive = PrototypeArchive::new(ae.latent_dim(), l);
    for (d, ds) in set.datasets.iter().enumerate() {
        let subs = set.subjects_of(d);
        if subs.is_empty() {
            continue;
        }
        let prep = prepared[d].as_ref().expect("dataset with members");
        let refs: Vec<&[f64]> = subs.iter().map(|&s| prep.normalized(s)).collect();
        for (s, p) in subs.iter().zip(ae.prototypes(&refs, &prep.grid)?) {
            archive.push(&ds.dataset_id, &ds.subjects[*s].subject_id, &p)?;
        }
    }
    Ok(PretrainOutcome {
        history: TrainingHistory {
            best_epoch: stopper.best_epoch(),
            epochs,
            steps: step,
            stop_reason,
        },
        magnitude_stats: stats,
        archive,
        train_lsd,
        validation_members: val_members,
    })
}

#[allow(clippy::too_many_arguments)]
fn record_epoch(
    epochs: &mut Vec<EpochRecord>,
    stopper: &mut EarlyStopping,
    ae: &ConditionedAutoencoder,
    set: &MergedTrainingSet,
    stats: &[NormalizationStats],
    val_members: &[SubjectRef],
    epoch: usize,
    train_loss: f64,
    lr: f64,
) -> Result<bool> {
    let val_loss = if val_members.is_empty() {
        None
    } else {
        Some(mean_lsd(ae, set, stats, val_members)?)
    };
    let stop = stopper.observe(epoch, val_loss.unwrap_or(train_loss), &ae.store);
    epochs.push(EpochRecord {
        epoch,
        train_loss,
        val_loss,
        learning_rate: lr,
        best_loss: stopper.best(),
    });
    Ok(stop)
}
