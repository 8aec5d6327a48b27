//! The 23 per-ear anthropometric parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const NUM_ANTHRO: usize = 23;

/// Fixed parameter order: 13 head/torso lengths, 8 pinna lengths (cm), 2 pinna angles (degrees).
pub const ANTHRO_NAMES: [&str; NUM_ANTHRO] = [
    "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x12", "x14", "x16", "x17", "d1", "d2",
    "d3", "d4", "d5", "d6", "d7", "d8", "theta1", "theta2",
];

/// Number of leading entries that are lengths in centimetres.
pub const NUM_LENGTHS: usize = 21;

const HEAD_WIDTH: usize = 0;
const CONCHA_DEPTH: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AnthropometricVector([f64; NUM_ANTHRO]);

impl AnthropometricVector {
    /// Accepts any finite values; see [`Self::check_physical`] for the unit constraints.
    pub fn new(values: [f64; NUM_ANTHRO]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!(
                "anthropometric parameter {} is not finite",
                ANTHRO_NAMES[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_ANTHRO] = values.try_into().map_err(|_| {
            contract(format!(
                "expected {NUM_ANTHRO} anthropometric values, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    /// Builds a vector from a name → value map, requiring every name exactly.
    pub fn from_named(map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut values = [0.0; NUM_ANTHRO];
        for (slot, name) in values.iter_mut().zip(ANTHRO_NAMES) {
            *slot = *map
                .get(name)
                .ok_or_else(|| contract(format!("missing anthropometric parameter {name}")))?;
        }
        if let Some(extra) = map.keys().find(|k| !ANTHRO_NAMES.contains(&k.as_str())) {
            return Err(contract(format!(
                "unknown anthropometric parameter {extra}"
            )));
        }
        Self::new(values)
    }

    pub fn to_named(&self) -> BTreeMap<String, f64> {
        ANTHRO_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(self.0)
            .collect()
    }

    /// Rejects non-positive lengths. Measured data must pass this; synthetic distractors need not.
    pub fn check_physical(&self) -> Result<()> {
        match self.0[..NUM_LENGTHS].iter().position(|&v| v <= 0.0) {
            Some(i) => Err(contract(format!(
                "length {} must be positive",
                ANTHRO_NAMES[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &[f64; NUM_ANTHRO] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        ANTHRO_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.0[i])
    }

    pub fn head_width_cm(&self) -> f64 {
        self.0[HEAD_WIDTH]
    }

    pub fn concha_depth_cm(&self) -> f64 {
        self.0[CONCHA_DEPTH]
    }
}

impl TryFrom<Vec<f64>> for AnthropometricVector {
    type Error = crate::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<AnthropometricVector> for Vec<f64> {
    fn from(a: AnthropometricVector) -> Self {
        a.0.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cover_the_fixed_order() {
        assert_eq!(ANTHRO_NAMES.len(), 23);
        assert_eq!(ANTHRO_NAMES[0], "x1");
        assert_eq!(ANTHRO_NAMES[CONCHA_DEPTH], "d8");
        assert_eq!(ANTHRO_NAMES[NUM_LENGTHS], "theta1");
    }

    #[test]
    fn named_map_round_trip() {
        let mut v = [1.0; NUM_ANTHRO];
        v[0] = 15.0;
        let a = AnthropometricVector::new(v).unwrap();
        let back = AnthropometricVector::from_named(&a.to_named()).unwrap();
        assert_eq!(a, back);
        assert_eq!(back.head_width_cm(), 15.0);
    }

    #[test]
    fn rejects_missing_and_non_finite() {
        let mut map = AnthropometricVector::new([1.0; NUM_ANTHRO])
            .unwrap()
            .to_named();
        map.remove("d3");
        assert!(AnthropometricVector::from_named(&map).is_err());
        let mut v = [1.0; NUM_ANTHRO];
        v[4] = f64::NAN;
        assert!(AnthropometricVector::new(v).is_err());
        assert!(AnthropometricVector::from_slice(&[1.0; 22]).is_err());
    }

    #[test]
    fn physical_check() {
        let mut v = [1.0; NUM_ANTHRO];
        v[NUM_ANTHRO - 1] = -30.0;
        assert!(AnthropometricVector::new(v)
            .unwrap()
            .check_physical()
            .is_ok());
        v[3] = 0.0;
        assert!(AnthropometricVector::new(v)
            .unwrap()
            .check_physical()
            .is_err());
    }
}
