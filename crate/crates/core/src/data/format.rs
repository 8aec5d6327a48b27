//! Binary containers: an 8-byte magic, a little-endian u32 header length, a JSON
//! header and a little-endian f32 payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{AnthropometricVector, HrtfDataset, SubjectRecord, ANTHRO_NAMES};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"HRTFDS01";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub(crate) fn encode_container<H: Serialize>(
    magic: &[u8; 8],
    header: &H,
    payload: &[f32],
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| format_err(8, "header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the prefix and header; returns the header and the payload start offset.
pub(crate) fn decode_container<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
) -> Result<(H, usize)> {
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(
            bytes.len(),
            format!(
                "file too short: expected at least {PREFIX_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..8] != magic {
        return Err(format_err(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let end = PREFIX_LEN + header_len;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!(
                "header truncated: expected {header_len} bytes, found {}",
                bytes.len() - PREFIX_LEN
            ),
        ));
    }
    let header = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| format_err(PREFIX_LEN, format!("invalid header JSON: {e}")))?;
    Ok((header, end))
}

/// Decodes exactly `count` floats starting at `offset`, rejecting truncation and trailing bytes.
pub(crate) fn read_payload(bytes: &[u8], offset: usize, count: usize) -> Result<Vec<f32>> {
    let expected = count * 4;
    let actual = bytes.len() - offset;
    if actual != expected {
        let what = if actual < expected {
            "payload truncated"
        } else {
            "trailing bytes after payload"
        };
        return Err(format_err(
            offset + actual.min(expected),
            format!("{what}: expected {expected} payload bytes, found {actual}"),
        ));
    }
    Ok(bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    dataset_id: String,
    num_subjects: usize,
    num_positions: usize,
    num_freq_bins: usize,
    f_max_hz: f64,
    source_distance_m: f64,
    frequencies_hz: Vec<f64>,
    anthro_names: Vec<String>,
    subjects: Vec<SubjectHeader>,
}

#[derive(Serialize, Deserialize)]
struct SubjectHeader {
    id: String,
    has_anthropometry: bool,
    anthropometry_left: Option<AnthropometricVector>,
    anthropometry_right: Option<AnthropometricVector>,
}

pub fn encode_dataset(ds: &HrtfDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        dataset_id: ds.dataset_id.clone(),
        num_subjects: ds.num_subjects(),
        num_positions: ds.num_positions(),
        num_freq_bins: ds.num_freq_bins(),
        f_max_hz: ds.f_max_hz,
        source_distance_m: ds.source_distance_m,
        frequencies_hz: ds.frequencies_hz.clone(),
        anthro_names: ANTHRO_NAMES.iter().map(|s| s.to_string()).collect(),
        subjects: ds
            .subjects
            .iter()
            .map(|s| SubjectHeader {
                id: s.subject_id.clone(),
                has_anthropometry: s.has_anthropometry(),
                anthropometry_left: s.anthropometry_left,
                anthropometry_right: s.anthropometry_right,
            })
            .collect(),
    };
    let mut payload = Vec::with_capacity(
        ds.num_positions() * 3
            + ds.subjects
                .iter()
                .map(|s| s.magnitudes_db.len())
                .sum::<usize>(),
    );
    payload.extend(ds.positions.iter().flatten());
    for s in &ds.subjects {
        payload.extend_from_slice(&s.magnitudes_db);
    }
    encode_container(DATASET_MAGIC, &header, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<HrtfDataset> {
    let (h, offset): (DatasetHeader, usize) = decode_container(bytes, DATASET_MAGIC)?;
    if h.format_version != FORMAT_VERSION {
        return Err(format_err(
            PREFIX_LEN,
            format!("unsupported format_version {}", h.format_version),
        ));
    }
    if h.anthro_names != ANTHRO_NAMES {
        return Err(format_err(
            PREFIX_LEN,
            "anthro_names do not match the 23-parameter order",
        ));
    }
    if h.subjects.len() != h.num_subjects || h.frequencies_hz.len() != h.num_freq_bins {
        return Err(Error::Shape {
            context: "dataset header".into(),
            expected: vec![h.num_subjects, h.num_freq_bins],
            actual: vec![h.subjects.len(), h.frequencies_hz.len()],
        });
    }
    let (b, l) = (h.num_positions, h.num_freq_bins);
    let per_subject = b * 2 * l;
    let floats = read_payload(bytes, offset, b * 3 + h.num_subjects * per_subject)?;
    if let Some(i) = floats.iter().position(|v| !v.is_finite()) {
        return Err(format_err(offset + 4 * i, "non-finite value in payload"));
    }
    let positions = floats[..b * 3]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let subjects = h
        .subjects
        .into_iter()
        .enumerate()
        .map(|(i, sh)| {
            let start = b * 3 + i * per_subject;
            let (left, right) = if sh.has_anthropometry {
                (sh.anthropometry_left, sh.anthropometry_right)
            } else {
                (None, None)
            };
            SubjectRecord {
                subject_id: sh.id,
                magnitudes_db: floats[start..start + per_subject].to_vec(),
                anthropometry_left: left,
                anthropometry_right: right,
            }
        })
        .collect();
    let ds = HrtfDataset {
        dataset_id: h.dataset_id,
        f_max_hz: h.f_max_hz,
        source_distance_m: h.source_distance_m,
        frequencies_hz: h.frequencies_hz,
        positions,
        subjects,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &HrtfDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<HrtfDataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fibonacci_sphere, linear_frequency_grid, NUM_ANTHRO};

    fn minimal(with_anthro: bool) -> HrtfDataset {
        let a = AnthropometricVector::new([1.5; NUM_ANTHRO]).unwrap();
        HrtfDataset {
            dataset_id: "mini".into(),
            f_max_hz: 20000.0,
            source_distance_m: 1.0,
            frequencies_hz: linear_frequency_grid(4, 20000.0),
            positions: fibonacci_sphere(2, 1.0),
            subjects: vec![SubjectRecord {
                subject_id: "s0".into(),
                magnitudes_db: (0..16).map(|v| v as f32 * -0.37 + 1e-7).collect(),
                anthropometry_left: with_anthro.then_some(a),
                anthropometry_right: with_anthro.then_some(a),
            }],
        }
    }

    #[test]
    fn minimal_round_trip_is_bit_exact() {
        for with in [true, false] {
            let ds = minimal(with);
            let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
            assert_eq!(back, ds);
            assert_eq!(back.subjects[0].has_anthropometry(), with);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&minimal(true)).unwrap();
        assert_eq!(&bytes[..8], b"HRTFDS01");
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["num_positions"], 2);
        assert_eq!(header["anthro_names"].as_array().unwrap().len(), 23);
        assert_eq!(bytes.len(), 12 + n + 4 * (2 * 3 + 16));
    }

    #[test]
    fn corrupted_magic_is_located() {
        let mut bytes = encode_dataset(&minimal(true)).unwrap();
        bytes[3] = b'X';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_names_byte_counts() {
        let bytes = encode_dataset(&minimal(true)).unwrap();
        let err = decode_dataset(&bytes[..bytes.len() - 4])
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected 88 payload bytes, found 84"), "{err}");
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut bytes = encode_dataset(&minimal(false)).unwrap();
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, at),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_dataset_refused_on_write() {
        let mut ds = minimal(true);
        ds.subjects[0].magnitudes_db.push(0.0);
        assert!(encode_dataset(&ds).is_err());
    }
}
