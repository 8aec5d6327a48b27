//! Subject-level k-fold cross-validation over a learning-rate / weight-decay grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::training::SEARCH_RANGE;

/// Shuffles `0..count` and deals it into `folds` nearly equal, disjoint parts.
pub fn kfold(count: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || count < folds {
        return Err(contract(format!(
            "cannot split {count} subjects into {folds} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, v) in idx.into_iter().enumerate() {
        out[i % folds].push(v);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Full grid of `values × values` for learning rate and weight decay.
pub fn search_grid(values: &[f64]) -> Vec<Hyperparameters> {
    values
        .iter()
        .flat_map(|&lr| {
            values.iter().map(move |&wd| Hyperparameters {
                learning_rate: lr,
                weight_decay: wd,
            })
        })
        .collect()
}

/// Endpoints and midpoint (in log scale) of the default search range.
pub fn default_search_values() -> Vec<f64> {
    let (lo, hi) = SEARCH_RANGE;
    vec![lo, (lo * hi).sqrt(), hi]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: Hyperparameters,
    pub fold_losses: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    pub best: Hyperparameters,
    pub folds: Vec<Vec<usize>>,
}

/// Runs `train_and_validate(train, validation, params)` for every fold and grid point
/// and returns the point with the lowest mean validation loss (first wins ties).
///
/// Subjects are the indices `0..num_subjects`; the caller maps them to data.
pub fn cross_validate<F>(
    num_subjects: usize,
    folds: usize,
    grid: &[Hyperparameters],
    seed: u64,
    mut train_and_validate: F,
) -> Result<CvResult>
where
    F: FnMut(&[usize], &[usize], Hyperparameters) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(contract("empty hyperparameter grid"));
    }
    let parts = kfold(num_subjects, folds, seed)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &params in grid {
        let mut fold_losses = Vec::with_capacity(folds);
        for (k, val) in parts.iter().enumerate() {
            let train: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let loss = train_and_validate(&train, val, params)?;
            log::info!(
                "cv lr {:.1e} wd {:.1e} fold {k}: {loss:.5}",
                params.learning_rate,
                params.weight_decay
            );
            fold_losses.push(loss);
        }
        let mean_loss = fold_losses.iter().sum::<f64>() / folds as f64;
        rows.push(CvRow {
            params,
            fold_losses,
            mean_loss,
        });
    }
    let best = rows
        .iter()
        .fold(None::<&CvRow>, |b, r| match b {
            Some(b) if b.mean_loss <= r.mean_loss => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid")
        .params;
    Ok(CvResult {
        rows,
        best,
        folds: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_subjects() {
        let f = kfold(23, 5, 1).unwrap();
        assert_eq!(f.len(), 5);
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(f.iter().all(|p| p.len() == 4 || p.len() == 5));
        assert!(kfold(4, 5, 0).is_err());
    }

    #[test]
    fn grid_spans_search_range() {
        let g = search_grid(&default_search_values());
        assert_eq!(g.len(), 9);
        assert!(g
            .iter()
            .all(|h| (1e-4..=1e-3).contains(&h.learning_rate)
                && (1e-4..=1e-3).contains(&h.weight_decay)));
    }
}
