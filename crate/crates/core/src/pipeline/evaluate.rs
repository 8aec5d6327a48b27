//! Per-subject LSD of any magnitude predictor over held-out subjects.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::individualize::{Individualizer, TargetGrid};
use super::models::TrainedHrtfDnn;
use crate::autoencoder::{lsd, ConditionedAutoencoder, TokenGrid};
use crate::data::{Ear, HrtfDataset, NormalizationStats};
use crate::error::{contract, Result};

/// Predicts a subject's `B × 2L` dB magnitudes on its own dataset grid.
pub trait MagnitudePredictor {
    fn parameter_count(&self) -> usize;
    fn predict(&mut self, ds: &HrtfDataset, subject: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub dataset_id: String,
    /// Mean LSD over positions and ears.
    pub lsd_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subjects: Vec<SubjectScore>,
    /// Across test subjects.
    pub mean: f64,
    /// Population standard deviation across test subjects.
    pub std: f64,
    pub per_dataset: Vec<DatasetSummary>,
    pub parameter_count: usize,
    pub runtime_s: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvaluationReport {
    /// `report.csv` with one row per subject and `summary.csv` with the aggregate.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_error)?;
        for s in &self.subjects {
            w.serialize(s).map_err(csv_error)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_error)?;
        w.write_record(["scope", "mean", "std", "count", "param_count"])
            .map_err(csv_error)?;
        let count = self.subjects.len().to_string();
        let params = self.parameter_count.to_string();
        w.write_record([
            "all",
            &self.mean.to_string(),
            &self.std.to_string(),
            &count,
            &params,
        ])
        .map_err(csv_error)?;
        for d in &self.per_dataset {
            w.write_record([
                &d.dataset_id,
                &d.mean.to_string(),
                &d.std.to_string(),
                &d.count.to_string(),
                &params,
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Scores every listed test subject; a subject's score is its mean LSD over positions and ears.
pub fn evaluate<P: MagnitudePredictor + ?Sized>(
    predictor: &mut P,
    test: &[(&HrtfDataset, Vec<usize>)],
) -> Result<EvaluationReport> {
    let start = Instant::now();
    let mut subjects = Vec::new();
    for (ds, subs) in test {
        for &s in subs {
            let pred = predictor.predict(ds, s)?;
            let truth: Vec<f64> = ds.subjects[s]
                .magnitudes_db
                .iter()
                .map(|&v| v as f64)
                .collect();
            subjects.push(SubjectScore {
                subject_id: ds.subjects[s].subject_id.clone(),
                dataset_id: ds.dataset_id.clone(),
                lsd_db: lsd(&pred, &truth, ds.num_freq_bins())?,
            });
        }
    }
    if subjects.is_empty() {
        return Err(contract("no test subjects to evaluate"));
    }
    let scores: Vec<f64> = subjects.iter().map(|s| s.lsd_db).collect();
    let (mean, std) = mean_std(&scores);
    let mut by_ds: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &subjects {
        by_ds.entry(&s.dataset_id).or_default().push(s.lsd_db);
    }
    let per_dataset = by_ds
        .into_iter()
        .map(|(id, v)| {
            let (mean, std) = mean_std(&v);
            DatasetSummary {
                dataset_id: id.to_string(),
                mean,
                std,
                count: v.len(),
            }
        })
        .collect();
    Ok(EvaluationReport {
        subjects,
        mean,
        std,
        per_dataset,
        parameter_count: predictor.parameter_count(),
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

impl MagnitudePredictor for Individualizer {
    /// Estimator plus the decoder it drives.
    fn parameter_count(&self) -> usize {
        self.estimator.parameter_count() + self.decoder.decoder_parameter_count()
    }

    fn predict(&mut self, ds: &HrtfDataset, subject: usize) -> Result<Vec<f64>> {
        let rec = &ds.subjects[subject];
        let (Some(a), Some(b)) = (rec.anthropometry(Ear::Left), rec.anthropometry(Ear::Right))
        else {
            return Err(contract(format!(
                "test subject {} lacks anthropometry",
                rec.subject_id
            )));
        };
        let seed = self.seed.wrapping_add(subject as u64);
        Ok(self
            .individualize([a, b], &TargetGrid::of_dataset(ds), &ds.dataset_id, seed)?
            .into_data())
    }
}

/// Per-(position, ear, bin) mean over training subjects of each dataset.
#[derive(Clone, Debug)]
pub struct MeanMagnitudePredictor {
    means: BTreeMap<String, Vec<f64>>,
}

impl MeanMagnitudePredictor {
    pub fn fit(train: &[(&HrtfDataset, Vec<usize>)]) -> Result<Self> {
        let mut means = BTreeMap::new();
        for (ds, subs) in train {
            if subs.is_empty() {
                continue;
            }
            let mut acc = vec![0.0; ds.subjects[subs[0]].magnitudes_db.len()];
            for &s in subs {
                for (a, &v) in acc.iter_mut().zip(&ds.subjects[s].magnitudes_db) {
                    *a += v as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= subs.len() as f64);
            means.insert(ds.dataset_id.clone(), acc);
        }
        Ok(Self { means })
    }
}

impl MagnitudePredictor for MeanMagnitudePredictor {
    fn parameter_count(&self) -> usize {
        0
    }

    fn predict(&mut self, ds: &HrtfDataset, _subject: usize) -> Result<Vec<f64>> {
        self.means
            .get(&ds.dataset_id)
            .cloned()
            .ok_or_else(|| contract(format!("no mean magnitudes for dataset {}", ds.dataset_id)))
    }
}

/// Encodes the subject's own magnitudes and decodes the resulting prototype: the ground-truth prototype path.
#[derive(Clone, Debug)]
pub struct PrototypeOracle<'a> {
    pub autoencoder: &'a ConditionedAutoencoder,
    pub magnitude: &'a [NormalizationStats],
}

impl MagnitudePredictor for PrototypeOracle<'_> {
    fn parameter_count(&self) -> usize {
        self.autoencoder.decoder_parameter_count()
    }

    fn predict(&mut self, ds: &HrtfDataset, subject: usize) -> Result<Vec<f64>> {
        let stats = self
            .magnitude
            .iter()
            .find(|s| s.source_dataset_ids.contains(&ds.dataset_id))
            .ok_or_else(|| contract(format!("no magnitude normalizer for {}", ds.dataset_id)))?;
        let raw: Vec<f64> = ds.subjects[subject]
            .magnitudes_db
            .iter()
            .map(|&v| v as f64)
            .collect();
        let norm = stats.apply(&raw, false)?;
        let grid = TokenGrid::from_dataset(ds)?;
        let proto = self
            .autoencoder
            .prototypes(&[&norm], &grid)?
            .pop()
            .expect("one prototype");
        let y = self.autoencoder.decode(&proto, &grid)?;
        stats.apply(y.data(), true)
    }
}

impl MagnitudePredictor for TrainedHrtfDnn {
    fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    fn predict(&mut self, ds: &HrtfDataset, subject: usize) -> Result<Vec<f64>> {
        let (b, l) = (ds.num_positions(), ds.num_freq_bins());
        if b != self.net.config.num_positions || l != self.net.config.num_freq_bins {
            return Err(contract(format!(
                "HRTF DNN was trained on a different grid than {}",
                ds.dataset_id
            )));
        }
        let rec = &ds.subjects[subject];
        let mut out = vec![0.0; b * 2 * l];
        for ear in Ear::BOTH {
            let alpha = rec.anthropometry(ear).ok_or_else(|| {
                contract(format!(
                    "test subject {} lacks anthropometry",
                    rec.subject_id
                ))
            })?;
            let y = self
                .net
                .predict(&self.anthro.apply(alpha.values(), false)?)?;
            let e = ear.index();
            for p in 0..b {
                for k in 0..l {
                    let f = e * l + k;
                    out[p * 2 * l + f] =
                        y[p * l + k] * self.magnitude.std[f] + self.magnitude.mean[f];
                }
            }
        }
        Ok(out)
    }
}
