use crate::data::AnthropometricVector;
use crate::error::{contract, Result};

/// Which ear a channel belongs to. Left is stored first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ear {
    Left,
    Right,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::Left, Ear::Right];

    pub fn index(self) -> usize {
        match self {
            Ear::Left => 0,
            Ear::Right => 1,
        }
    }

    /// Conditioning flag: +1 left, -1 right.
    pub fn flag(self) -> f64 {
        match self {
            Ear::Left => 1.0,
            Ear::Right => -1.0,
        }
    }

    /// Unit vector through the ear canal in the head frame (+y is left).
    pub fn axis(self) -> [f64; 3] {
        [0.0, self.flag(), 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// `B × 2L` row-major; per position the left ear's L bins, then the right ear's.
    pub magnitudes_db: Vec<f32>,
    pub anthropometry_left: Option<AnthropometricVector>,
    pub anthropometry_right: Option<AnthropometricVector>,
}

impl SubjectRecord {
    pub fn has_anthropometry(&self) -> bool {
        self.anthropometry_left.is_some() && self.anthropometry_right.is_some()
    }

    pub fn anthropometry(&self, ear: Ear) -> Option<&AnthropometricVector> {
        match ear {
            Ear::Left => self.anthropometry_left.as_ref(),
            Ear::Right => self.anthropometry_right.as_ref(),
        }
    }
}

/// One measured (or synthesized) HRTF collection on a single source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HrtfDataset {
    pub dataset_id: String,
    pub f_max_hz: f64,
    pub source_distance_m: f64,
    pub frequencies_hz: Vec<f64>,
    /// Cartesian metres, origin at the head centre, +x front, +y left, +z up.
    pub positions: Vec<[f32; 3]>,
    pub subjects: Vec<SubjectRecord>,
}

impl HrtfDataset {
    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    pub fn num_freq_bins(&self) -> usize {
        self.frequencies_hz.len()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.subject_id == id)
    }

    /// Magnitude in dB for subject `s`, position `b`, `ear`, bin `l`.
    pub fn magnitude(&self, s: usize, b: usize, ear: Ear, l: usize) -> f32 {
        let n = self.num_freq_bins();
        self.subjects[s].magnitudes_db[b * 2 * n + ear.index() * n + l]
    }

    /// Positions divided by the source distance.
    pub fn unit_directions(&self) -> Vec<[f64; 3]> {
        let r = self.source_distance_m;
        self.positions
            .iter()
            .map(|p| [p[0] as f64 / r, p[1] as f64 / r, p[2] as f64 / r])
            .collect()
    }

    /// True when both datasets share bit-identical source positions.
    pub fn same_grid(&self, other: &HrtfDataset) -> bool {
        self.positions == other.positions
    }

    /// Checks every structural invariant; writers refuse datasets that fail.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_freq_bins();
        if n == 0 || self.positions.is_empty() {
            return Err(contract(
                "dataset needs at least one position and one frequency",
            ));
        }
        if !(self.f_max_hz > 0.0 && self.f_max_hz.is_finite()) {
            return Err(contract("f_max_hz must be positive"));
        }
        if !(self.source_distance_m > 0.0 && self.source_distance_m.is_finite()) {
            return Err(contract("source distance must be positive"));
        }
        if self
            .frequencies_hz
            .iter()
            .any(|f| !f.is_finite() || *f < 0.0)
        {
            return Err(contract("frequencies must be finite and non-negative"));
        }
        if self.frequencies_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract("frequencies must be strictly ascending"));
        }
        if self.frequencies_hz[n - 1] > self.f_max_hz {
            return Err(contract("last frequency exceeds f_max_hz"));
        }
        let r = self.source_distance_m;
        for (b, p) in self.positions.iter().enumerate() {
            let norm = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - r).abs() > 0.01 * r {
                return Err(contract(format!(
                    "position {b} has radius {norm}, expected {r} within 1%"
                )));
            }
        }
        let expected = self.num_positions() * 2 * n;
        for s in &self.subjects {
            if s.magnitudes_db.len() != expected {
                return Err(crate::Error::Shape {
                    context: format!("magnitudes of subject {}", s.subject_id),
                    expected: vec![self.num_positions(), 2 * n],
                    actual: vec![s.magnitudes_db.len()],
                });
            }
            if s.magnitudes_db.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!(
                    "subject {} has non-finite magnitudes",
                    s.subject_id
                )));
            }
            if s.anthropometry_left.is_some() != s.anthropometry_right.is_some() {
                return Err(contract(format!(
                    "subject {} must carry anthropometry for both ears or neither",
                    s.subject_id
                )));
            }
        }
        let mut ids: Vec<&str> = self
            .subjects
            .iter()
            .map(|s| s.subject_id.as_str())
            .collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(contract(format!("duplicate subject id {}", w[0])));
        }
        Ok(())
    }
}

/// `L` evenly spaced bins from DC to `f_max` inclusive.
pub fn linear_frequency_grid(num_bins: usize, f_max_hz: f64) -> Vec<f64> {
    match num_bins {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n)
            .map(|l| f_max_hz * l as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Near-uniform points on a sphere of radius `r` (golden-angle spiral).
pub fn fibonacci_sphere(count: usize, r: f64) -> Vec<[f32; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let ring = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [
                (r * ring * phi.cos()) as f32,
                (r * ring * phi.sin()) as f32,
                (r * z) as f32,
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HrtfDataset {
        HrtfDataset {
            dataset_id: "t".into(),
            f_max_hz: 20000.0,
            source_distance_m: 1.0,
            frequencies_hz: linear_frequency_grid(4, 20000.0),
            positions: fibonacci_sphere(2, 1.0),
            subjects: vec![SubjectRecord {
                subject_id: "a".into(),
                magnitudes_db: (0..16).map(|v| v as f32).collect(),
                anthropometry_left: None,
                anthropometry_right: None,
            }],
        }
    }

    #[test]
    fn layout_is_position_major_left_first() {
        let ds = tiny();
        assert!(ds.validate().is_ok());
        assert_eq!(ds.magnitude(0, 0, Ear::Left, 0), 0.0);
        assert_eq!(ds.magnitude(0, 0, Ear::Right, 0), 4.0);
        assert_eq!(ds.magnitude(0, 1, Ear::Left, 3), 11.0);
    }

    #[test]
    fn validation_catches_broken_invariants() {
        let mut ds = tiny();
        ds.frequencies_hz[2] = ds.frequencies_hz[1];
        assert!(ds.validate().is_err());
        let mut ds = tiny();
        ds.positions[0] = [1.2, 0.0, 0.0];
        assert!(ds.validate().is_err());
        let mut ds = tiny();
        ds.subjects[0].magnitudes_db.pop();
        assert!(ds.validate().is_err());
        let mut ds = tiny();
        ds.subjects[0].magnitudes_db[3] = f32::INFINITY;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn grids() {
        let f = linear_frequency_grid(128, 20000.0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[127], 20000.0);
        for p in fibonacci_sphere(100, 1.47) {
            let n = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.47).abs() < 1e-6);
        }
    }
}
