//! Epoch bookkeeping shared by every training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{
    clip_global_norm, AdamW, Graph, LrSchedule, LrScheduleKind, ParamStore, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub schedule: LrScheduleKind,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Fraction of training subjects held out per dataset for early stopping.
    pub validation_fraction: f64,
    /// Hard cap on optimizer steps, checked after each step.
    pub max_steps: Option<usize>,
    /// Stop as soon as an epoch's training loss falls below this value.
    pub target_train_loss: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 300,
            patience: 20,
            schedule: LrScheduleKind::plateau_default(),
            batch_size: 32,
            validation_fraction: 0.1,
            max_steps: None,
            target_train_loss: None,
            grad_clip: None,
            seed: 0,
        }
    }
}

/// Bounds of the hyperparameter search range for learning rate and weight decay.
pub const SEARCH_RANGE: (f64, f64) = (1e-4, 1e-3);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// True when lr and weight decay both lie in the default search range.
    pub fn in_search_range(&self) -> bool {
        let (lo, hi) = SEARCH_RANGE;
        (lo..=hi).contains(&self.learning_rate) && (lo..=hi).contains(&self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    MaxSteps,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    /// Best monitored loss seen so far (validation when available, else training).
    pub best_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn best_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.best_loss)
    }
}

/// Tracks the monitored loss, keeps the best weights and decides when to stop.
#[derive(Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
    best_params: Option<Vec<Tensor>>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            best_params: None,
        }
    }

    /// Records an epoch; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, store: &ParamStore) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            self.best_params = Some(store.snapshot());
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Writes the best weights back into `store`.
    pub fn restore_best(&self, store: &mut ParamStore) -> Result<()> {
        match &self.best_params {
            Some(p) => store.restore(p),
            None => Ok(()),
        }
    }
}

/// Splits `items` into (train, validation), holding out `fraction` (at least one) when there are two or more.
pub fn holdout<T: Clone, R: Rng>(items: &[T], fraction: f64, rng: &mut R) -> (Vec<T>, Vec<T>) {
    if fraction <= 0.0 || items.len() < 2 {
        return (items.to_vec(), Vec::new());
    }
    let n_val = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len() - 1);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| items[i].clone()).collect(),
        val.into_iter().map(|i| items[i].clone()).collect(),
    )
}

/// Fails with a divergence error when `loss` is not finite.
pub fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("loss became {loss} at step {step}");
        Err(Error::Divergence { step, loss })
    }
}

/// Shuffled mini-batches covering every index once.
pub fn batches<R: Rng>(count: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Mini-batch training over `num_samples` indexed samples with AdamW, the configured
/// schedule and early stopping.
///
/// `batch_loss` records the loss of one batch of sample indices on a training graph.
/// `validation_loss` is evaluated after every epoch; when it returns `None` the epoch's
/// training loss is monitored instead. The best weights are restored unless training
/// ended on `max_steps` or `target_train_loss`.
pub fn fit<F, V>(
    store: &mut ParamStore,
    num_samples: usize,
    config: &TrainConfig,
    mut batch_loss: F,
    mut validation_loss: V,
) -> Result<TrainingHistory>
where
    F: FnMut(&mut Graph, &ParamStore, &[usize], &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&ParamStore) -> Result<Option<f64>>,
{
    config.validate()?;
    if num_samples == 0 {
        return Err(contract("no training samples"));
    }
    if store.is_frozen() {
        return Err(contract("cannot train a frozen model"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut sched = LrSchedule::new(config.schedule, config.learning_rate)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..config.max_epochs {
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut hit_cap = false;
        for batch in batches(num_samples, config.batch_size, &mut rng) {
            let mut g = Graph::training(rng.random());
            let loss = batch_loss(&mut g, store, &batch, &mut rng)?;
            let value = g.value(loss).item();
            check_loss(step, value)?;
            let mut grads = g.backward(loss)?.for_store(store);
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(store, &grads)?;
            step += 1;
            loss_sum += value * batch.len() as f64;
            count += batch.len();
            if config.max_steps.is_some_and(|m| step >= m) {
                hit_cap = true;
                break;
            }
        }
        let train_loss = loss_sum / count as f64;
        let val_loss = validation_loss(store)?;
        let stop = stopper.observe(epoch, val_loss.unwrap_or(train_loss), store);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: opt.learning_rate,
            best_loss: stopper.best(),
        });
        log::debug!(
            "epoch {epoch}: train {train_loss:.5}, val {val_loss:?}, lr {:.2e}",
            opt.learning_rate
        );
        if hit_cap {
            stop_reason = StopReason::MaxSteps;
            break;
        }
        if config.target_train_loss.is_some_and(|t| train_loss < t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
        opt.learning_rate = sched.step(epoch, val_loss.unwrap_or(train_loss), opt.learning_rate);
    }
    if !matches!(
        stop_reason,
        StopReason::MaxSteps | StopReason::TargetReached
    ) {
        stopper.restore_best(store)?;
    }
    Ok(TrainingHistory {
        epochs,
        steps: step,
        stop_reason,
        best_epoch: stopper.best_epoch(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn holdout_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = holdout(&(0..30).collect::<Vec<_>>(), 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (27, 3));
        let (t, v) = holdout(&[1, 2, 3], 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (2, 1));
        let (t, v) = holdout(&[1], 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (1, 0));
    }

    #[test]
    fn early_stopping_after_patience() {
        let store = ParamStore::new();
        let mut es = EarlyStopping::new(3);
        assert!(!es.observe(0, 1.0, &store));
        assert!(!es.observe(1, 1.0, &store));
        assert!(!es.observe(2, 2.0, &store));
        assert!(es.observe(3, 1.5, &store));
        assert_eq!(es.best_epoch(), 0);
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all: Vec<usize> = batches(10, 3, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_reported() {
        assert!(matches!(
            check_loss(7, f64::NAN),
            Err(Error::Divergence { step: 7, .. })
        ));
    }
}

#[cfg(test)]
mod fit_tests {
    use super::*;

    /// Least squares on one parameter: `(w - 3)²`.
    fn quadratic(store: &mut ParamStore, config: &TrainConfig) -> TrainingHistory {
        let id = store.id_at(0);
        fit(
            store,
            4,
            config,
            |g, s, _, _| {
                let w = g.param(s, id);
                let w = g.add_scalar(w, -3.0);
                let sq = g.square(w);
                Ok(g.sum(sq))
            },
            |_| Ok(None),
        )
        .unwrap()
    }

    #[test]
    fn converges_and_counts_steps() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![0.0]));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            batch_size: 2,
            patience: 1000,
            max_steps: Some(400),
            ..TrainConfig::default()
        };
        let h = quadratic(&mut store, &cfg);
        assert_eq!(h.steps, 400);
        assert_eq!(h.stop_reason, StopReason::MaxSteps);
        assert!((store.entries()[0].value.item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn stops_on_target() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![2.9]));
        let cfg = TrainConfig {
            target_train_loss: Some(1.0),
            ..TrainConfig::default()
        };
        let h = quadratic(&mut store, &cfg);
        assert_eq!(h.stop_reason, StopReason::TargetReached);
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn refuses_frozen_store() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![0.0]));
        store.freeze();
        let r = fit(
            &mut store,
            1,
            &TrainConfig::default(),
            |g, _, _, _| Ok(g.constant(Tensor::scalar(0.0))),
            |_| Ok(None),
        );
        assert!(r.is_err());
    }
}
