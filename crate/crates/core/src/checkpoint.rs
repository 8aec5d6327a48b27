//! Model checkpoints: architecture config and normalizers in a JSON header,
//! parameters as a flat f32 payload in declared order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format::{decode_container, encode_container, read_payload};
use crate::error::{contract, Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRTFCK01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model family, e.g. `autoencoder` or `proto_dnn`.
    pub kind: String,
    pub config: serde_json::Value,
    /// Normalizers and any other metadata the model needs at inference.
    pub extra: serde_json::Value,
    pub params: Vec<ParamLayout>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(
        kind: &str,
        config: &impl Serialize,
        extra: serde_json::Value,
        store: &ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            header: CheckpointHeader {
                format_version: 1,
                kind: kind.into(),
                config: serde_json::to_value(config)?,
                extra,
                params: store
                    .entries()
                    .iter()
                    .map(|e| ParamLayout {
                        name: e.name.clone(),
                        shape: e.value.shape().to_vec(),
                    })
                    .collect(),
            },
            tensors: store.snapshot(),
        })
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(contract(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.header.kind
            )))
        }
    }

    /// Copies the stored tensors into `store`, which must have the same names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(contract(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (layout, entry) in self.header.params.iter().zip(store.entries()) {
            if layout.name != entry.name || layout.shape != entry.value.shape() {
                return Err(contract(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    layout.name,
                    layout.shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        store.restore(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<f32> = self.tensors.iter().flat_map(|t| t.to_f32()).collect();
        encode_container(CHECKPOINT_MAGIC, &self.header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset): (CheckpointHeader, usize) =
            decode_container(bytes, CHECKPOINT_MAGIC)?;
        let total: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let flat = read_payload(bytes, offset, total)?;
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: (offset + 4 * i) as u64,
                message: "non-finite parameter".into(),
            });
        }
        let mut tensors = Vec::with_capacity(header.params.len());
        let mut at = 0;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            tensors.push(Tensor::from_f32(&p.shape, &flat[at..at + n])?);
            at += n;
        }
        Ok(Self { header, tensors })
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
    fn round_trip_and_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(vec![0.5, -1.25]));
        store.add("b", Tensor::zeros(&[2, 2]));
        let ck = Checkpoint::capture(
            "toy",
            &serde_json::json!({"w": 2}),
            serde_json::Value::Null,
            &store,
        )
        .unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut fresh = ParamStore::new();
        fresh.add("a", Tensor::zeros(&[2]));
        fresh.add("b", Tensor::ones(&[2, 2]));
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.fingerprint(), store.fingerprint());

        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::zeros(&[3]));
        wrong.add("b", Tensor::zeros(&[2, 2]));
        assert!(back.restore_into(&mut wrong).is_err());
        assert!(back.expect_kind("other").is_err());
    }
}
