//! Experiment configuration and the stages shared by the CLI and the full protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, default_search_values, search_grid, CvResult, Hyperparameters};
use super::evaluate::{evaluate, EvaluationReport};
use super::individualize::Individualizer;
use super::models::{Estimator, Normalizers, TrainedHrtfDnn};
use crate::autoencoder::{
    pretrain_autoencoder, AutoencoderConfig, ConditionedAutoencoder, PretrainConfig,
    PretrainOutcome, PrototypeArchive,
};
use crate::data::{
    profile_split, read_dataset, split_subjects, synth_generate, DatasetProfile, HrtfDataset,
    MergedTrainingSet, NormalizationStats, SubjectSplit, SynthSpec,
};
use crate::diffusion::{
    train_diffusion, DiffusionTrainConfig, PrototypeUnet, SamplerConfig, UnetConfig,
};
use crate::error::{contract, Error, Result};
use crate::estimators::{
    train_hrtf_dnn, train_prototype_dnn, HrtfDnn, HrtfDnnConfig, ProtoDnnConfig, PrototypeDnn,
    PrototypeTargets,
};
use crate::training::{TrainConfig, TrainingHistory, SEARCH_RANGE};

pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const ARCHIVE_FILE: &str = "prototypes.hpz";
pub const BASELINE_FILE: &str = "hrtf_dnn.ckpt";
pub const CV_FILE: &str = "cv.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    ProtoDnn,
    ProtoDm,
    HrtfDnn,
}

impl EstimatorKind {
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Self::ProtoDnn => "proto_dnn.ckpt",
            Self::ProtoDm => "proto_dm.ckpt",
            Self::HrtfDnn => BASELINE_FILE,
        }
    }
}

/// Synthetic collection generated in place of a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSource {
    pub dataset_id: String,
    pub num_subjects: usize,
    pub num_without_anthropometry: usize,
    pub num_positions: usize,
    pub num_freq_bins: usize,
}

impl Default for SynthSource {
    fn default() -> Self {
        Self {
            dataset_id: "synth".into(),
            num_subjects: 20,
            num_without_anthropometry: 0,
            num_positions: 64,
            num_freq_bins: 32,
        }
    }
}

/// One collection and its partition. Explicit ids win over profile counts; with neither,
/// the last fifth of the subjects with anthropometry are held out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    /// A `.hds` file.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthSource>,
    /// `cipic` or `hutubs`: split counts, and the synthetic grid when neither path nor synth is set.
    pub profile: Option<String>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ae_only_ids: Vec<String>,
}

impl DatasetSource {
    fn profile(&self) -> Result<Option<DatasetProfile>> {
        self.profile
            .as_deref()
            .map(|p| {
                DatasetProfile::by_name(p)
                    .ok_or_else(|| Error::Config(format!("unknown dataset profile {p}")))
            })
            .transpose()
    }

    pub fn load(&self, seed: u64) -> Result<HrtfDataset> {
        match (&self.path, &self.synth, self.profile()?) {
            (Some(p), _, _) => read_dataset(p),
            (None, Some(s), _) => {
                let mut spec = SynthSpec::simple(
                    &s.dataset_id,
                    s.num_subjects,
                    s.num_positions,
                    s.num_freq_bins,
                );
                spec.num_without_anthropometry = s.num_without_anthropometry;
                synth_generate(seed, &spec)
            }
            (None, None, Some(p)) => synth_generate(seed, &p.synth_spec()),
            (None, None, None) => Err(Error::Config(
                "dataset source needs a path, a synth block or a profile".into(),
            )),
        }
    }

    pub fn split(&self, ds: &HrtfDataset) -> Result<SubjectSplit> {
        if !(self.train_ids.is_empty() && self.test_ids.is_empty()) {
            return split_subjects(ds, &self.train_ids, &self.test_ids, &self.ae_only_ids);
        }
        if let Some(p) = self.profile()? {
            return p.split(ds);
        }
        let with = ds.subjects.iter().filter(|s| s.has_anthropometry()).count();
        let test = (with / 5).max(1).min(with.saturating_sub(1));
        profile_split(ds, with - test, test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSettings {
    pub folds: usize,
    /// Candidate values for both learning rate and weight decay.
    pub values: Vec<f64>,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            values: default_search_values(),
        }
    }
}

/// Everything a run needs; the JSON form mirrors these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSource>,
    pub estimator: EstimatorKind,
    /// Estimator learning rate and weight decay.
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Permits estimator hyperparameters outside the search range.
    pub allow_out_of_range: bool,
    pub autoencoder: AutoencoderConfig,
    pub pretrain: PretrainConfig,
    pub proto_dnn: ProtoDnnConfig,
    /// Epochs, schedule and batching of the prototype DNN and the HRTF DNN.
    pub train: TrainConfig,
    pub unet: UnetConfig,
    pub diffusion: DiffusionTrainConfig,
    pub hrtf_dnn: HrtfDnnConfig,
    pub sampler: SamplerConfig,
    pub cv: CvSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: vec![DatasetSource {
                synth: Some(SynthSource::default()),
                ..DatasetSource::default()
            }],
            estimator: EstimatorKind::ProtoDnn,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            allow_out_of_range: false,
            autoencoder: AutoencoderConfig::default(),
            pretrain: PretrainConfig::default(),
            proto_dnn: ProtoDnnConfig::default(),
            train: TrainConfig::default(),
            unet: UnetConfig::default(),
            diffusion: DiffusionTrainConfig::default(),
            hrtf_dnn: HrtfDnnConfig::default(),
            sampler: SamplerConfig::default(),
            cv: CvSettings::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn in_range(v: f64) -> bool {
    (SEARCH_RANGE.0..=SEARCH_RANGE.1).contains(&v)
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if !self.allow_out_of_range {
            let mut values = vec![self.learning_rate, self.weight_decay];
            values.extend(&self.cv.values);
            if let Some(v) = values.iter().find(|v| !in_range(**v)) {
                return Err(Error::Config(format!(
                    "hyperparameter {v:e} outside [{:e}, {:e}]; set allow_out_of_range to override",
                    SEARCH_RANGE.0, SEARCH_RANGE.1
                )));
            }
        }
        self.pretrain.train.validate()?;
        self.estimator_train(self.hyperparameters()).validate()?;
        self.sampler.schedule()?;
        Ok(())
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
        }
    }

    /// Training settings of the configured estimator with `params` applied.
    pub fn estimator_train(&self, params: Hyperparameters) -> TrainConfig {
        let base = match self.estimator {
            EstimatorKind::ProtoDm => &self.diffusion.train,
            _ => &self.train,
        };
        TrainConfig {
            learning_rate: params.learning_rate,
            weight_decay: params.weight_decay,
            seed: self.seed,
            ..base.clone()
        }
    }

    fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            init_seed: self.seed,
            ..self.autoencoder.clone()
        }
    }
}

/// Loaded collections and their partitions, in configuration order.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub datasets: Vec<HrtfDataset>,
    pub splits: Vec<SubjectSplit>,
}

impl LoadedData {
    /// Synthetic sources get the experiment seed offset by their position.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let mut datasets = Vec::new();
        let mut splits = Vec::new();
        for (i, src) in config.datasets.iter().enumerate() {
            let ds = src.load(config.seed.wrapping_add(i as u64))?;
            splits.push(src.split(&ds)?);
            datasets.push(ds);
        }
        Ok(Self { datasets, splits })
    }

    fn merged(&self, pick: impl Fn(&SubjectSplit) -> Vec<usize>) -> Result<MergedTrainingSet> {
        MergedTrainingSet::from_parts(
            self.datasets
                .iter()
                .cloned()
                .zip(self.splits.iter().map(pick))
                .collect(),
        )
    }

    /// Training plus ae-only subjects.
    pub fn pretraining_set(&self) -> Result<MergedTrainingSet> {
        self.merged(SubjectSplit::pretraining)
    }

    pub fn training_set(&self) -> Result<MergedTrainingSet> {
        self.merged(|s| s.train.clone())
    }

    pub fn train_sets(&self) -> Vec<(&HrtfDataset, Vec<usize>)> {
        self.datasets
            .iter()
            .zip(&self.splits)
            .map(|(d, s)| (d, s.train.clone()))
            .collect()
    }

    pub fn test_sets(&self) -> Vec<(&HrtfDataset, Vec<usize>)> {
        self.datasets
            .iter()
            .zip(&self.splits)
            .map(|(d, s)| (d, s.test.clone()))
            .collect()
    }
}

/// Pretrains and freezes a fresh autoencoder on the pretraining subjects.
pub fn run_pretraining(
    config: &ExperimentConfig,
    data: &LoadedData,
) -> Result<(ConditionedAutoencoder, PretrainOutcome)> {
    let mut ae = ConditionedAutoencoder::new(config.autoencoder_config())?;
    let pretrain = PretrainConfig {
        train: TrainConfig {
            seed: config.seed,
            ..config.pretrain.train.clone()
        },
        ..config.pretrain.clone()
    };
    let outcome = pretrain_autoencoder(&mut ae, &data.pretraining_set()?, &pretrain)?;
    Ok((ae, outcome))
}

/// A trained prototype estimator with everything needed to run it.
#[derive(Clone, Debug)]
pub struct TrainedEstimator {
    pub estimator: Estimator,
    pub normalizers: Normalizers,
    pub history: TrainingHistory,
    pub warnings: Vec<String>,
}

fn new_estimator(config: &ExperimentConfig, latent_dim: usize) -> Result<Estimator> {
    Ok(match config.estimator {
        EstimatorKind::ProtoDnn => Estimator::ProtoDnn(PrototypeDnn::new(ProtoDnnConfig {
            latent_dim,
            init_seed: config.seed,
            ..config.proto_dnn.clone()
        })?),
        EstimatorKind::ProtoDm => Estimator::ProtoDm {
            net: PrototypeUnet::new(UnetConfig {
                channels: latent_dim,
                init_seed: config.seed,
                ..config.unet.clone()
            })?,
            sampler: config.sampler.clone(),
        },
        EstimatorKind::HrtfDnn => {
            return Err(Error::Config(
                "the HRTF DNN is not a prototype estimator".into(),
            ))
        }
    })
}

/// Trains the configured prototype estimator; `validation` drives early stopping.
fn fit_estimator(
    config: &ExperimentConfig,
    params: Hyperparameters,
    train: &PrototypeTargets,
    validation: &PrototypeTargets,
) -> Result<(Estimator, TrainingHistory, Vec<String>)> {
    let mut est = new_estimator(config, train.latent_dim)?;
    let tc = config.estimator_train(params);
    let val = (!validation.is_empty()).then_some(validation);
    let (history, warnings) = match &mut est {
        Estimator::ProtoDnn(net) => (train_prototype_dnn(net, train, val, &tc)?, Vec::new()),
        Estimator::ProtoDm { net, sampler } => {
            let dc = DiffusionTrainConfig {
                train: tc,
                sampler: sampler.clone(),
                ..config.diffusion.clone()
            };
            let out = train_diffusion(net, &sampler.schedule()?, train, val, &dc)?;
            (out.history, out.warnings)
        }
    };
    Ok((est, history, warnings))
}

/// Trains the configured prototype estimator on every training subject, holding out
/// the configured validation fraction for early stopping.
pub fn run_estimator_training(
    config: &ExperimentConfig,
    params: Hyperparameters,
    data: &LoadedData,
    archive: &PrototypeArchive,
    magnitude: Vec<NormalizationStats>,
) -> Result<TrainedEstimator> {
    let targets = PrototypeTargets::fit(&data.training_set()?, archive)?;
    let fraction = config.estimator_train(params).validation_fraction;
    let (train, val) = targets.split_validation(fraction, config.seed);
    let (estimator, history, warnings) = fit_estimator(config, params, &train, &val)?;
    Ok(TrainedEstimator {
        estimator,
        normalizers: Normalizers::new(&targets, magnitude),
        history,
        warnings,
    })
}

/// Trains the fixed-grid baseline; refuses collections with differing source grids.
pub fn run_baseline_training(
    config: &ExperimentConfig,
    params: Hyperparameters,
    set: &MergedTrainingSet,
) -> Result<(TrainedHrtfDnn, TrainingHistory)> {
    let first = set
        .datasets
        .first()
        .ok_or_else(|| contract("empty training set"))?;
    let mut net = HrtfDnn::new(
        HrtfDnnConfig {
            init_seed: config.seed,
            ..config.hrtf_dnn.clone()
        }
        .sized_for(first),
    )?;
    let out = train_hrtf_dnn(&mut net, set, &config.estimator_train(params))?;
    let magnitude = out
        .magnitude_stats
        .into_iter()
        .next()
        .ok_or_else(|| contract("no magnitude statistics"))?;
    Ok((
        TrainedHrtfDnn {
            net,
            anthro: out.anthro_stats,
            magnitude,
        },
        out.history,
    ))
}

/// Subject-level cross-validation of the configured estimator over the training subjects.
///
/// Prototype estimators are scored by their own validation objective with statistics fitted
/// on the fold's training part; the baseline by the held-out subjects' mean LSD.
pub fn run_cross_validation(
    config: &ExperimentConfig,
    data: &LoadedData,
    archive: Option<&PrototypeArchive>,
) -> Result<CvResult> {
    let set = data.training_set()?;
    let grid = search_grid(&config.cv.values);
    let subset = |idx: &[usize]| set.with_members(idx.iter().map(|&i| set.members[i]).collect());
    cross_validate(
        set.len(),
        config.cv.folds,
        &grid,
        config.seed,
        |train, val, params| {
            let (fold_train, fold_val) = (subset(train), subset(val));
            match config.estimator {
                EstimatorKind::HrtfDnn => {
                    let (mut model, _) = run_baseline_training(config, params, &fold_train)?;
                    let test: Vec<(&HrtfDataset, Vec<usize>)> = fold_val
                        .datasets
                        .iter()
                        .enumerate()
                        .map(|(d, ds)| (ds, fold_val.subjects_of(d)))
                        .filter(|(_, s)| !s.is_empty())
                        .collect();
                    Ok(evaluate(&mut model, &test)?.mean)
                }
                _ => {
                    let archive = archive
                        .ok_or_else(|| contract("prototype estimators need a prototype archive"))?;
                    let t = PrototypeTargets::fit(&fold_train, archive)?;
                    let v = PrototypeTargets::with_stats(
                        &fold_val,
                        archive,
                        t.anthro_stats.clone(),
                        t.prototype_stats.clone(),
                    )?;
                    let (_, history, _) = fit_estimator(config, params, &t, &v)?;
                    Ok(history.best_loss())
                }
            }
        },
    )
}

/// Test-set report of a trained prototype estimator and its decoder.
pub fn evaluate_estimator(
    config: &ExperimentConfig,
    data: &LoadedData,
    estimator: &Estimator,
    normalizers: &Normalizers,
    decoder: &ConditionedAutoencoder,
) -> Result<EvaluationReport> {
    let mut ind = Individualizer::new(
        estimator.clone(),
        decoder.clone(),
        normalizers.clone(),
        config.seed,
    )?;
    evaluate(&mut ind, &data.test_sets())
}

/// Result of [`run_protocol`].
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub cv: CvResult,
    pub report: EvaluationReport,
}

/// Pretraining, cross-validation, retraining with the best hyperparameters and test
/// evaluation; every artifact lands in `config.out_dir`.
pub fn run_protocol(config: &ExperimentConfig) -> Result<ProtocolOutcome> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    let data = LoadedData::load(config)?;
    let (cv, report) = if config.estimator == EstimatorKind::HrtfDnn {
        let cv = run_cross_validation(config, &data, None)?;
        let (mut model, _) = run_baseline_training(config, cv.best, &data.training_set()?)?;
        model.save(out.join(BASELINE_FILE))?;
        (cv.clone(), evaluate(&mut model, &data.test_sets())?)
    } else {
        let (ae, pre) = run_pretraining(config, &data)?;
        super::models::save_autoencoder(&ae, &pre.magnitude_stats, out.join(AUTOENCODER_FILE))?;
        pre.archive.save(out.join(ARCHIVE_FILE))?;
        let cv = run_cross_validation(config, &data, Some(&pre.archive))?;
        let trained = run_estimator_training(
            config,
            cv.best,
            &data,
            &pre.archive,
            pre.magnitude_stats.clone(),
        )?;
        trained.estimator.save(
            &trained.normalizers,
            out.join(config.estimator.checkpoint_file()),
        )?;
        let report =
            evaluate_estimator(config, &data, &trained.estimator, &trained.normalizers, &ae)?;
        (cv, report)
    };
    std::fs::write(out.join(CV_FILE), serde_json::to_string_pretty(&cv)?)?;
    report.write_csv(out)?;
    Ok(ProtocolOutcome { cv, report })
}
