//! Named trainable parameters owned outside any single graph.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{contract, Result};
use crate::numerics::Tensor;

static NEXT_STORE_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of parameters for one model.
///
/// Insertion order is the serialization order used by checkpoints. A frozen
/// store enters graphs as constants, so no gradient ever reaches it. Clones
/// share the original's ids.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u32,
    entries: Vec<ParamEntry>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let index = self.entries.len() as u32;
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId {
            store: self.tag,
            index,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag && id.index() < self.entries.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert!(
            self.owns(id),
            "parameter {id:?} does not belong to this store"
        );
        &self.entries[id.index()].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(
            self.owns(id),
            "parameter {id:?} does not belong to this store"
        );
        &mut self.entries[id.index()].value
    }

    pub fn id_at(&self, index: usize) -> ParamId {
        ParamId {
            store: self.tag,
            index: index as u32,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Hash over every parameter's bit pattern, used to prove a store is untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            e.name.hash(&mut h);
            e.value.shape().hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(contract("snapshot length does not match store"));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(contract(format!("snapshot shape mismatch for {}", e.name)));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}
