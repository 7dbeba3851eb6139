use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::Tensor;

static NEXT_STORE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a parameter inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

struct ParamEntry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter tensors. Each store gets a process-unique id so that a
/// single tape can mix parameters from several stores (e.g. a frozen world
/// model and a trainable actor) without collisions in the gradient map.
pub struct ParamStore {
    store_id: u32,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            store_id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn store_id(&self) -> u32 {
        self.store_id
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push(ParamEntry { name, tensor, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Copy every tensor from `other`, matched by name. Shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore) {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|s| s.name == e.name)
                .unwrap_or_else(|| panic!("copy_from: missing parameter '{}'", e.name));
            assert_eq!(
                src.tensor.shape(),
                e.tensor.shape(),
                "copy_from: shape mismatch for '{}'",
                e.name
            );
            e.tensor = src.tensor.clone();
        }
    }

    /// Snapshot of all tensors, in declaration order. Used by bitwise tests.
    pub fn dump(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient map produced by [`crate::Tape::backward`]: one tensor per
/// parameter that participated in the graph, keyed by (store, param).
/// BTreeMap keeps iteration deterministic.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<(u32, usize), Tensor>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, store_id: u32, id: ParamId, grad: Tensor) {
        self.map.insert((store_id, id.0), grad);
    }

    /// Gradient for a parameter, if it participated in the loss. Detached or
    /// unused parameters simply have no entry, which callers treat as zero.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(store.store_id(), id.0))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, usize), &Tensor)> {
        self.map.iter()
    }
}
