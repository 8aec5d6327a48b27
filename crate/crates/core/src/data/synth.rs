//! Spherical-head stand-in for measured HRTF collections.
//!
//! Each subject's magnitudes depend only on head width `x1` and concha depth `d8`:
//! a high-frequency head shadow that grows away from the ear axis, plus a concha
//! notch near the quarter-wave resonance of `d8`. The other 21 parameters are
//! random distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    fibonacci_sphere, linear_frequency_grid, AnthropometricVector, Ear, HrtfDataset, SubjectRecord,
    NUM_ANTHRO,
};
use crate::error::{contract, Result};

const SPEED_OF_SOUND: f64 = 343.0;
const REFERENCE_HEAD_WIDTH_CM: f64 = 17.5;
const SHADOW_DB: f64 = 6.0;
const NOTCH_DEPTH_DB: f64 = 15.0;
const NOTCH_WIDTH_HZ: f64 = 1000.0;

pub const HEAD_WIDTH_RANGE_CM: (f64, f64) = (12.0, 18.0);
pub const CONCHA_DEPTH_RANGE_CM: (f64, f64) = (0.8, 2.0);

/// Quarter-wave resonance of a concha of depth `d8_cm`.
pub fn notch_frequency_hz(d8_cm: f64) -> f64 {
    SPEED_OF_SOUND / (4.0 * d8_cm * 0.01)
}

/// Head-shadow term in dB for cosine `cos_gamma` between source and ear axis.
pub fn shadow_db(freq_hz: f64, f_max_hz: f64, cos_gamma: f64, x1_cm: f64) -> f64 {
    -SHADOW_DB * (freq_hz / f_max_hz) * (1.0 - cos_gamma) * (x1_cm / REFERENCE_HEAD_WIDTH_CM)
}

/// Concha-notch term in dB.
pub fn notch_db(freq_hz: f64, cos_gamma: f64, d8_cm: f64) -> f64 {
    let offset = freq_hz - notch_frequency_hz(d8_cm);
    -NOTCH_DEPTH_DB
        * (-(offset * offset) / (2.0 * NOTCH_WIDTH_HZ * NOTCH_WIDTH_HZ)).exp()
        * cos_gamma.max(0.0)
}

/// Full synthetic magnitude for one (direction, ear, frequency).
pub fn synth_magnitude_db(
    unit_dir: [f64; 3],
    ear: Ear,
    freq_hz: f64,
    f_max_hz: f64,
    x1_cm: f64,
    d8_cm: f64,
) -> f64 {
    let axis = ear.axis();
    let cos_gamma = unit_dir.iter().zip(axis).map(|(u, e)| u * e).sum::<f64>();
    shadow_db(freq_hz, f_max_hz, cos_gamma, x1_cm) + notch_db(freq_hz, cos_gamma, d8_cm)
}

/// Magnitudes `B × 2L` for one head on the given grid.
pub fn synth_subject_magnitudes(
    positions: &[[f32; 3]],
    frequencies_hz: &[f64],
    r: f64,
    f_max_hz: f64,
    x1_cm: f64,
    d8_cm: f64,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(positions.len() * 2 * frequencies_hz.len());
    for p in positions {
        let u = [p[0] as f64 / r, p[1] as f64 / r, p[2] as f64 / r];
        for ear in Ear::BOTH {
            for &f in frequencies_hz {
                out.push(synth_magnitude_db(u, ear, f, f_max_hz, x1_cm, d8_cm) as f32);
            }
        }
    }
    out
}

/// Anthropometry for one ear: informative `x1` and `d8`, uniform distractors elsewhere.
pub fn synth_anthropometry<R: Rng>(x1_cm: f64, d8_cm: f64, rng: &mut R) -> AnthropometricVector {
    let mut v = [0.0; NUM_ANTHRO];
    for slot in v.iter_mut() {
        *slot = rng.random_range(-1.0..=1.0);
    }
    v[0] = x1_cm;
    v[20] = d8_cm;
    AnthropometricVector::new(v).expect("finite draws")
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub dataset_id: String,
    pub num_subjects: usize,
    /// The last this-many subjects are written without anthropometry.
    pub num_without_anthropometry: usize,
    pub positions: Vec<[f32; 3]>,
    pub frequencies_hz: Vec<f64>,
    pub source_distance_m: f64,
    pub f_max_hz: f64,
}

impl SynthSpec {
    /// Fibonacci-sphere grid with `num_positions` points and `num_bins` linear bins.
    pub fn simple(
        dataset_id: &str,
        num_subjects: usize,
        num_positions: usize,
        num_bins: usize,
    ) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            num_subjects,
            num_without_anthropometry: 0,
            positions: fibonacci_sphere(num_positions, 1.0),
            frequencies_hz: linear_frequency_grid(num_bins, 20000.0),
            source_distance_m: 1.0,
            f_max_hz: 20000.0,
        }
    }
}

pub fn synth_generate(seed: u64, spec: &SynthSpec) -> Result<HrtfDataset> {
    if spec.num_without_anthropometry > spec.num_subjects {
        return Err(contract("more anthropometry-free subjects than subjects"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_anthro = spec.num_subjects - spec.num_without_anthropometry;
    let subjects = (0..spec.num_subjects)
        .map(|s| {
            let x1 = rng.random_range(HEAD_WIDTH_RANGE_CM.0..=HEAD_WIDTH_RANGE_CM.1);
            let d8 = rng.random_range(CONCHA_DEPTH_RANGE_CM.0..=CONCHA_DEPTH_RANGE_CM.1);
            let left = synth_anthropometry(x1, d8, &mut rng);
            let right = synth_anthropometry(x1, d8, &mut rng);
            let keep = s < with_anthro;
            SubjectRecord {
                subject_id: format!("{}-{s:03}", spec.dataset_id),
                magnitudes_db: synth_subject_magnitudes(
                    &spec.positions,
                    &spec.frequencies_hz,
                    spec.source_distance_m,
                    spec.f_max_hz,
                    x1,
                    d8,
                ),
                anthropometry_left: keep.then_some(left),
                anthropometry_right: keep.then_some(right),
            }
        })
        .collect();
    let ds = HrtfDataset {
        dataset_id: spec.dataset_id.clone(),
        f_max_hz: spec.f_max_hz,
        source_distance_m: spec.source_distance_m,
        frequencies_hz: spec.frequencies_hz.clone(),
        positions: spec.positions.clone(),
        subjects,
    };
    ds.validate()?;
    Ok(ds)
}

/// Grid and subject-count metadata of a measured collection.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetProfile {
    pub dataset_id: &'static str,
    pub num_positions: usize,
    pub source_distance_m: f64,
    pub num_train: usize,
    pub num_test: usize,
    /// Extra subjects lacking complete anthropometry, used only for autoencoder pretraining.
    pub num_ae_only: usize,
    pub num_freq_bins: usize,
    pub f_max_hz: f64,
}

impl DatasetProfile {
    pub const CIPIC: DatasetProfile = DatasetProfile {
        dataset_id: "cipic",
        num_positions: 1250,
        source_distance_m: 1.0,
        num_train: 30,
        num_test: 5,
        num_ae_only: 10,
        num_freq_bins: 128,
        f_max_hz: 20000.0,
    };

    pub const HUTUBS: DatasetProfile = DatasetProfile {
        dataset_id: "hutubs",
        num_positions: 440,
        source_distance_m: 1.47,
        num_train: 85,
        num_test: 6,
        num_ae_only: 3,
        num_freq_bins: 128,
        f_max_hz: 20000.0,
    };

    pub fn by_name(name: &str) -> Option<DatasetProfile> {
        match name.to_ascii_lowercase().as_str() {
            "cipic" => Some(Self::CIPIC),
            "hutubs" => Some(Self::HUTUBS),
            _ => None,
        }
    }

    pub fn num_subjects(&self) -> usize {
        self.num_train + self.num_test + self.num_ae_only
    }

    /// Synthetic stand-in with this profile's grid size, radius and subject counts.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            dataset_id: format!("synth-{}", self.dataset_id),
            num_subjects: self.num_subjects(),
            num_without_anthropometry: self.num_ae_only,
            positions: fibonacci_sphere(self.num_positions, self.source_distance_m),
            frequencies_hz: linear_frequency_grid(self.num_freq_bins, self.f_max_hz),
            source_distance_m: self.source_distance_m,
            f_max_hz: self.f_max_hz,
        }
    }
}
