//! Prototype archive: one `2L × D` prototype per subject (left-ear rows first).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format::{decode_container, encode_container, read_payload};
use crate::data::Ear;
use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;

pub const PROTOTYPE_MAGIC: &[u8; 8] = b"HRTFPZ01";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchivedPrototype {
    pub dataset_id: String,
    pub subject_id: String,
    /// `2L × D` row-major.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeArchive {
    pub latent_dim: usize,
    pub num_freq_bins: usize,
    pub entries: Vec<ArchivedPrototype>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    format_version: u32,
    #[serde(rename = "D")]
    latent_dim: usize,
    #[serde(rename = "L")]
    num_freq_bins: usize,
    /// Row ranges of each channel inside a prototype.
    channels: Vec<ChannelRows>,
    subjects: Vec<SubjectIndex>,
}

#[derive(Serialize, Deserialize)]
struct ChannelRows {
    channel: String,
    first_row: usize,
    rows: usize,
}

#[derive(Serialize, Deserialize)]
struct SubjectIndex {
    index: usize,
    dataset_id: String,
    subject_id: String,
}

impl ArchivedPrototype {
    pub fn tensor(&self, num_freq_bins: usize, latent_dim: usize) -> Tensor {
        Tensor::from_f32(&[2 * num_freq_bins, latent_dim], &self.values)
            .expect("archive shape checked on insert")
    }
}

impl PrototypeArchive {
    pub fn new(latent_dim: usize, num_freq_bins: usize) -> Self {
        Self {
            latent_dim,
            num_freq_bins,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, dataset_id: &str, subject_id: &str, prototype: &Tensor) -> Result<()> {
        let expected = [2 * self.num_freq_bins, self.latent_dim];
        if prototype.shape() != expected {
            return Err(Error::Shape {
                context: "archived prototype".into(),
                expected: expected.to_vec(),
                actual: prototype.shape().to_vec(),
            });
        }
        self.entries.push(ArchivedPrototype {
            dataset_id: dataset_id.into(),
            subject_id: subject_id.into(),
            values: prototype.to_f32(),
        });
        Ok(())
    }

    pub fn find(&self, dataset_id: &str, subject_id: &str) -> Option<&ArchivedPrototype> {
        self.entries
            .iter()
            .find(|e| e.dataset_id == dataset_id && e.subject_id == subject_id)
    }

    /// Full prototype `[2L, D]`.
    pub fn prototype(&self, dataset_id: &str, subject_id: &str) -> Result<Tensor> {
        self.find(dataset_id, subject_id)
            .map(|e| e.tensor(self.num_freq_bins, self.latent_dim))
            .ok_or_else(|| contract(format!("no prototype for {dataset_id}/{subject_id}")))
    }

    /// One ear's rows `[L, D]`.
    pub fn ear_prototype(&self, dataset_id: &str, subject_id: &str, ear: Ear) -> Result<Tensor> {
        let e = self
            .find(dataset_id, subject_id)
            .ok_or_else(|| contract(format!("no prototype for {dataset_id}/{subject_id}")))?;
        let per = self.num_freq_bins * self.latent_dim;
        let start = ear.index() * per;
        Tensor::from_f32(
            &[self.num_freq_bins, self.latent_dim],
            &e.values[start..start + per],
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ArchiveHeader {
            format_version: 1,
            latent_dim: self.latent_dim,
            num_freq_bins: self.num_freq_bins,
            channels: Ear::BOTH
                .iter()
                .map(|&e| ChannelRows {
                    channel: if e == Ear::Left { "left" } else { "right" }.into(),
                    first_row: e.index() * self.num_freq_bins,
                    rows: self.num_freq_bins,
                })
                .collect(),
            subjects: self
                .entries
                .iter()
                .enumerate()
                .map(|(index, e)| SubjectIndex {
                    index,
                    dataset_id: e.dataset_id.clone(),
                    subject_id: e.subject_id.clone(),
                })
                .collect(),
        };
        let payload: Vec<f32> = self
            .entries
            .iter()
            .flat_map(|e| e.values.iter().copied())
            .collect();
        encode_container(PROTOTYPE_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, offset): (ArchiveHeader, usize) = decode_container(bytes, PROTOTYPE_MAGIC)?;
        let per = 2 * h.num_freq_bins * h.latent_dim;
        let flat = read_payload(bytes, offset, per * h.subjects.len())?;
        let mut subjects = h.subjects;
        subjects.sort_by_key(|s| s.index);
        let entries = subjects
            .into_iter()
            .enumerate()
            .map(|(i, s)| ArchivedPrototype {
                dataset_id: s.dataset_id,
                subject_id: s.subject_id,
                values: flat[i * per..(i + 1) * per].to_vec(),
            })
            .collect();
        Ok(Self {
            latent_dim: h.latent_dim,
            num_freq_bins: h.num_freq_bins,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_ear_views() {
        let mut a = PrototypeArchive::new(2, 3);
        let p = Tensor::new(&[6, 2], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        a.push("ds", "s1", &p).unwrap();
        assert!(a.push("ds", "bad", &Tensor::zeros(&[3, 2])).is_err());
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"HRTFPZ01");
        let back = PrototypeArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        let right = back.ear_prototype("ds", "s1", Ear::Right).unwrap();
        assert_eq!(right.data()[0], 3.0);
        assert!(PrototypeArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
