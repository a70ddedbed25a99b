use std::collections::HashMap;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamKind, ParamStore, SPECTRAL_EPS};
use crate::tensor::Tensor;

/// Which statistics normalization layers use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Statistics of the current batch (training convention).
    #[default]
    Batch,
    /// Stored running statistics, held fixed.
    Running,
}

/// One forward evaluation against a parameter store.
///
/// Parameters enter the tape as leaves; only weights whose names match one
/// of the trainable prefixes receive gradients. Spectrally normalized
/// weights are divided by their current `σ̂` on the way in. Updates to
/// running statistics are collected and applied by the caller afterwards,
/// so the store stays borrowed immutably during the pass.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: Vec<String>,
    mode: NormMode,
    track_running: bool,
    momentum: f32,
    cache: HashMap<ParamId, Var>,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    /// A gradient-recording pass; weights under `trainable` get gradients.
    pub fn train(store: &'a ParamStore, trainable: &[&str]) -> Self {
        Self {
            graph: Graph::new(),
            store,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            mode: NormMode::Batch,
            track_running: true,
            momentum: 0.1,
            cache: HashMap::new(),
            updates: Vec::new(),
        }
    }

    /// A pass without gradients.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::no_grad(),
            track_running: false,
            ..Self::train(store, &[])
        }
    }

    pub fn with_mode(mut self, mode: NormMode) -> Self {
        self.mode = mode;
        self
    }

    /// Whether batch-mode normalizations record running-statistic updates.
    pub fn tracking(mut self, on: bool) -> Self {
        self.track_running = on;
        self
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn is_trainable(&self, id: ParamId) -> bool {
        let p = self.store.get(id);
        p.kind == ParamKind::Weight && self.trainable.iter().any(|pre| p.name.starts_with(pre.as_str()))
    }

    /// The effective weight for `id`, created once per session.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.cache.get(&id) {
            return Ok(v);
        }
        let p = self.store.get(id);
        let trainable = self.is_trainable(id);
        let leaf = self.graph.param_leaf(id, p.value.clone(), trainable);
        let v = match &p.spectral {
            Some(s) => self.graph.spectral_norm(leaf, &s.u, &s.v, SPECTRAL_EPS)?,
            None => leaf,
        };
        self.cache.insert(id, v);
        Ok(v)
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        &self.store.get(id).value
    }

    /// Blends a batch statistic into a running buffer.
    pub fn update_running(&mut self, id: ParamId, batch: &[f32]) {
        if !self.track_running || self.mode != NormMode::Batch {
            return;
        }
        let m = self.momentum;
        let base = self
            .updates
            .iter()
            .rev()
            .find(|(u, _)| *u == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.store.get(id).value.clone());
        let mut next = base;
        for (r, &b) in next.data_mut().iter_mut().zip(batch) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates.push((id, next));
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Ends the pass, returning the tape and pending buffer updates.
    pub fn finish(self) -> (Graph, BufferUpdates) {
        (self.graph, BufferUpdates(self.updates))
    }
}

/// Running-statistic writes produced by a [`Session`].
#[derive(Debug, Default)]
pub struct BufferUpdates(Vec<(ParamId, Tensor)>);

impl BufferUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for (id, t) in self.0 {
            store.get_mut(id).value = t;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
