//! HRTF collections: container format, synthetic generator, normalization and splits.

mod anthro;
mod dataset;
pub mod format;
mod normalize;
mod split;
pub mod synth;

pub use anthro::{AnthropometricVector, ANTHRO_NAMES, NUM_ANTHRO, NUM_LENGTHS};
pub use dataset::{fibonacci_sphere, linear_frequency_grid, Ear, HrtfDataset, SubjectRecord};
pub use format::{read_dataset, write_dataset};
pub use normalize::{
    fit_anthro_stats, fit_magnitude_stats, fit_normalizer, NormScope, NormalizationStats, STD_EPS,
};
pub use split::{
    merge_datasets, profile_split, split_subjects, MergedTrainingSet, SubjectRef, SubjectSplit,
};
pub use synth::{synth_generate, DatasetProfile, SynthSpec};
