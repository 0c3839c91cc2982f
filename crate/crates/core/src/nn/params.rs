use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent state that is not optimized (batch-norm running stats).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    kind: ParamKind,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: names are fixed by the architecture.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }

    /// Replaces one value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", cur.shape(), value.shape()));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Folds batch statistics into running mean/var:
    /// `r ← (1 − momentum)·r + momentum·batch`, with the unbiased variance.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let correction = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            let m = u.momentum;
            for (r, b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
    }
}

/// Pending running-statistics update from one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: the tape, the parameters bound onto it, and the batch
/// norm updates collected along the way.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    vars: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Binds every trainable parameter onto `tape`, as a traced leaf when
    /// `track` is set and as a constant otherwise.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable if track => Some(tape.leaf(e.value.clone())),
                ParamKind::Trainable => Some(tape.constant(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Ctx {
            tape,
            store,
            mode,
            vars,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("{} is not a trainable parameter", self.store.name(id)))
    }

    /// Tape variable of every trainable parameter, in store order.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}
