//! Subject partitions and multi-dataset training sets.

use std::collections::HashSet;

use crate::data::{DatasetProfile, HrtfDataset};
use crate::error::{contract, Result};

/// Subject indices into one dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubjectSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Subjects that join autoencoder pretraining only.
    pub ae_only: Vec<usize>,
}

impl SubjectSplit {
    /// Everything the autoencoder may see: training plus ae-only subjects.
    pub fn pretraining(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.extend(&self.ae_only);
        v
    }
}

pub fn split_subjects<S: AsRef<str>>(
    ds: &HrtfDataset,
    train_ids: &[S],
    test_ids: &[S],
    ae_only_ids: &[S],
) -> Result<SubjectSplit> {
    let mut seen = HashSet::new();
    let mut resolve = |ids: &[S]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                let id = id.as_ref();
                if !seen.insert(id.to_string()) {
                    return Err(contract(format!(
                        "subject {id} appears in more than one partition"
                    )));
                }
                ds.subject_index(id).ok_or_else(|| {
                    contract(format!("unknown subject {id} in dataset {}", ds.dataset_id))
                })
            })
            .collect()
    };
    let train = resolve(train_ids)?;
    let test = resolve(test_ids)?;
    let ae_only = resolve(ae_only_ids)?;
    for &i in train.iter().chain(&test) {
        if !ds.subjects[i].has_anthropometry() {
            return Err(contract(format!(
                "subject {} lacks anthropometry and can only be ae-only",
                ds.subjects[i].subject_id
            )));
        }
    }
    Ok(SubjectSplit {
        train,
        test,
        ae_only,
    })
}

/// Subjects without anthropometry become ae-only; the rest fill train then test in file order.
pub fn profile_split(ds: &HrtfDataset, num_train: usize, num_test: usize) -> Result<SubjectSplit> {
    let (with, without): (Vec<usize>, Vec<usize>) =
        (0..ds.num_subjects()).partition(|&i| ds.subjects[i].has_anthropometry());
    if with.len() < num_train + num_test {
        return Err(contract(format!(
            "dataset {} has {} subjects with anthropometry, need {}",
            ds.dataset_id,
            with.len(),
            num_train + num_test
        )));
    }
    Ok(SubjectSplit {
        train: with[..num_train].to_vec(),
        test: with[num_train..num_train + num_test].to_vec(),
        ae_only: without,
    })
}

impl DatasetProfile {
    pub fn split(&self, ds: &HrtfDataset) -> Result<SubjectSplit> {
        profile_split(ds, self.num_train, self.num_test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubjectRef {
    pub dataset: usize,
    pub subject: usize,
}

/// Subjects drawn from several datasets, each kept on its native source grid.
#[derive(Clone, Debug)]
pub struct MergedTrainingSet {
    pub datasets: Vec<HrtfDataset>,
    pub members: Vec<SubjectRef>,
}

impl MergedTrainingSet {
    /// One dataset restricted to `subjects`.
    pub fn single(ds: HrtfDataset, subjects: &[usize]) -> Self {
        Self {
            members: subjects
                .iter()
                .map(|&s| SubjectRef {
                    dataset: 0,
                    subject: s,
                })
                .collect(),
            datasets: vec![ds],
        }
    }

    /// Several datasets, each restricted to its subject list.
    pub fn from_parts(parts: Vec<(HrtfDataset, Vec<usize>)>) -> Result<Self> {
        let mut merged = merge_datasets(parts.iter().map(|(d, _)| d.clone()).collect())?;
        merged.members = parts
            .iter()
            .enumerate()
            .flat_map(|(d, (_, subs))| {
                subs.iter().map(move |&s| SubjectRef {
                    dataset: d,
                    subject: s,
                })
            })
            .collect();
        Ok(merged)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.dataset_id.clone()).collect()
    }

    /// True when every dataset shares one source grid.
    pub fn single_grid(&self) -> bool {
        self.datasets.windows(2).all(|w| w[0].same_grid(&w[1]))
    }

    /// Members belonging to dataset `d`, as subject indices.
    pub fn subjects_of(&self, d: usize) -> Vec<usize> {
        self.members
            .iter()
            .filter(|m| m.dataset == d)
            .map(|m| m.subject)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HrtfDataset, usize)> + '_ {
        self.members
            .iter()
            .map(|m| (&self.datasets[m.dataset], m.subject))
    }

    /// Copy restricted to `members`.
    pub fn with_members(&self, members: Vec<SubjectRef>) -> Self {
        Self {
            datasets: self.datasets.clone(),
            members,
        }
    }
}

/// Union of all subjects; frequency grids must match, source grids may differ.
pub fn merge_datasets(datasets: Vec<HrtfDataset>) -> Result<MergedTrainingSet> {
    let first = datasets
        .first()
        .ok_or_else(|| contract("nothing to merge"))?;
    for d in &datasets[1..] {
        let same = d.num_freq_bins() == first.num_freq_bins()
            && (d.f_max_hz - first.f_max_hz).abs() <= 1e-6
            && d.frequencies_hz
                .iter()
                .zip(&first.frequencies_hz)
                .all(|(a, b)| (a - b).abs() <= 1e-6);
        if !same {
            return Err(contract(format!(
                "frequency grid of {} differs from {}",
                d.dataset_id, first.dataset_id
            )));
        }
    }
    let members = datasets
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| {
            (0..ds.num_subjects()).map(move |s| SubjectRef {
                dataset: d,
                subject: s,
            })
        })
        .collect();
    Ok(MergedTrainingSet { datasets, members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn ds(id: &str, n: usize, b: usize, l: usize) -> HrtfDataset {
        let mut spec = SynthSpec::simple(id, n, b, l);
        spec.num_without_anthropometry = 1;
        synth_generate(3, &spec).unwrap()
    }

    #[test]
    fn explicit_split_and_overlap() {
        let d = ds("a", 5, 4, 4);
        let s = split_subjects(&d, &["a-000", "a-001"], &["a-002"], &["a-004"]).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.pretraining(), vec![0, 1, 4]);
        assert!(split_subjects(&d, &["a-000"], &["a-000"], &[]).is_err());
        assert!(split_subjects(&d, &["zzz"], &[], &[]).is_err());
        assert!(split_subjects(&d, &["a-004"], &[], &[]).is_err());
    }

    #[test]
    fn merge_keeps_grids() {
        let a = ds("a", 3, 10, 4);
        let b = ds("b", 2, 7, 4);
        let m = merge_datasets(vec![a.clone(), b]).unwrap();
        assert_eq!(m.len(), 5);
        assert!(!m.single_grid());
        assert_eq!(m.datasets[1].num_positions(), 7);
        let twice = merge_datasets(vec![a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.len(), 6);
        assert!(twice.single_grid());
        assert!(merge_datasets(vec![a, ds("c", 2, 10, 5)]).is_err());
    }
}
