//! Z-score normalization fitted on training data only.

use serde::{Deserialize, Serialize};

use crate::data::{Ear, HrtfDataset};
use crate::error::{contract, Error, Result};

pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One set of stats per dataset, per (ear, frequency) feature.
    PerDatasetMagnitude,
    /// Pooled over all training subjects and both ears.
    GlobalAnthro,
    /// Pooled over all training prototypes, per (frequency, latent) feature.
    GlobalPrototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scope: NormScope,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source_dataset_ids: Vec<String>,
}

impl NormalizationStats {
    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    fn check_width(&self, len: usize) -> Result<usize> {
        let n = self.num_features();
        if n == 0 || len % n != 0 {
            return Err(Error::Shape {
                context: "normalizer features".into(),
                expected: vec![n],
                actual: vec![len],
            });
        }
        Ok(n)
    }

    /// Normalizes rows of `num_features` values in place (or undoes it when `inverse`).
    pub fn apply_in_place(&self, values: &mut [f64], inverse: bool) -> Result<()> {
        let n = self.check_width(values.len())?;
        for row in values.chunks_exact_mut(n) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if inverse { *v * s + m } else { (*v - m) / s };
            }
        }
        Ok(())
    }

    pub fn apply(&self, values: &[f64], inverse: bool) -> Result<Vec<f64>> {
        let mut out = values.to_vec();
        self.apply_in_place(&mut out, inverse)?;
        Ok(out)
    }
}

/// Per-feature mean and population standard deviation over `rows`.
pub fn fit_normalizer<R: AsRef<[f64]>>(
    rows: &[R],
    scope: NormScope,
    source_dataset_ids: Vec<String>,
) -> Result<NormalizationStats> {
    if rows.len() < 2 {
        return Err(contract(format!(
            "normalizer needs at least 2 samples, got {}",
            rows.len()
        )));
    }
    let n = rows[0].as_ref().len();
    if n == 0 || rows.iter().any(|r| r.as_ref().len() != n) {
        return Err(contract("normalizer rows must share a non-zero width"));
    }
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for r in rows {
        for ((acc, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count).sqrt().max(STD_EPS))
        .collect();
    Ok(NormalizationStats {
        scope,
        mean,
        std,
        source_dataset_ids,
    })
}

/// Magnitude stats of one dataset over the chosen subjects; features are the 2L (ear, bin) pairs.
pub fn fit_magnitude_stats(ds: &HrtfDataset, subjects: &[usize]) -> Result<NormalizationStats> {
    let width = 2 * ds.num_freq_bins();
    let rows: Vec<Vec<f64>> = subjects
        .iter()
        .flat_map(|&s| {
            ds.subjects[s]
                .magnitudes_db
                .chunks_exact(width)
                .map(|row| row.iter().map(|&v| v as f64).collect::<Vec<f64>>())
        })
        .collect();
    fit_normalizer(
        &rows,
        NormScope::PerDatasetMagnitude,
        vec![ds.dataset_id.clone()],
    )
}

/// Anthropometry stats pooled over both ears of every listed `(dataset, subject)` pair.
pub fn fit_anthro_stats(
    datasets: &[&HrtfDataset],
    members: &[(usize, usize)],
) -> Result<NormalizationStats> {
    let mut rows = Vec::new();
    for &(d, s) in members {
        let subject = &datasets[d].subjects[s];
        for ear in Ear::BOTH {
            let a = subject.anthropometry(ear).ok_or_else(|| {
                contract(format!(
                    "subject {} lacks anthropometry",
                    subject.subject_id
                ))
            })?;
            rows.push(a.values().to_vec());
        }
    }
    let mut ids: Vec<String> = Vec::new();
    for &(d, _) in members {
        if !ids.contains(&datasets[d].dataset_id) {
            ids.push(datasets[d].dataset_id.clone());
        }
    }
    fit_normalizer(&rows, NormScope::GlobalAnthro, ids)
}
