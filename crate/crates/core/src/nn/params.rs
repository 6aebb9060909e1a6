//! Named parameter storage shared across forward passes.
//!
//! Parameters are reference-counted so a forward graph can bind them as
//! leaves without copying. The optimizer mutates them in place between
//! passes, when no graph holds a reference.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with a unique name path, e.g. `encoder.attn.h0.w_q`.
#[derive(Clone)]
pub struct Parameter {
    name: String,
    tensor: Arc<Tensor>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Arc<Tensor> {
        &self.tensor
    }
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId, NnError> {
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Arc::new(tensor),
        });
        Ok(id)
    }

    /// Uniform init on `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NnError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, NnError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_scalar(&mut self, name: &str, value: f64) -> Result<ParamId, NnError> {
        self.add(name, Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Mutable access to a parameter's values. Panics if a forward graph
    /// still holds the tensor; callers must step between passes.
    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::get_mut(&mut self.params[idx].tensor)
            .expect("parameter mutated while a forward graph is alive")
    }

    /// Overwrite one parameter's values.
    pub fn set_param(&mut self, id: ParamId, values: &[f64]) -> Result<(), NnError> {
        let t = self.tensor_mut(id.0);
        if t.len() != values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter expects {} values, got {}",
                t.len(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Replace all values from raw per-parameter slices, e.g. a checkpoint.
    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<(), NnError> {
        if values.len() != self.params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameter buffers, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (idx, vals) in values.iter().enumerate() {
            let t = self.tensor_mut(idx);
            if t.len() != vals.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter {} expects {} values, got {}",
                    idx,
                    t.len(),
                    vals.len()
                )));
            }
            t.data_mut().copy_from_slice(vals);
        }
        Ok(())
    }

    /// Deep copy of all parameter values (used for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }
}

/// Caches one leaf node per parameter within a single forward graph.
pub struct Binder {
    ids: Vec<Option<NodeId>>,
    trainable: bool,
}

impl Binder {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Binder {
            ids: vec![None; store.len()],
            trainable,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.ids[id.0] {
            return n;
        }
        let node = g.shared_leaf(store.get(id).tensor.clone(), self.trainable);
        self.ids[id.0] = Some(node);
        node
    }

    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.ids[id.0]
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
    }
}

/// Per-parameter gradient accumulation across a mini-batch.
pub struct GradBuffer {
    bufs: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros(store: &ParamStore) -> Self {
        GradBuffer {
            bufs: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }

    /// Pull gradients of every bound parameter out of a finished graph.
    pub fn accumulate(&mut self, graph: &Graph, binder: &Binder) {
        for (pid, node) in binder.bound() {
            if let Some(g) = graph.grad(node) {
                let buf = &mut self.bufs[pid.0];
                for (o, &v) in buf.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
    }

    /// Merge another buffer (chunked deterministic reduction).
    pub fn merge(&mut self, other: &GradBuffer) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub(crate) fn bufs(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    #[cfg(test)]
    pub(crate) fn bufs_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.bufs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[2])),
            Err(NnError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn binder_returns_same_node_for_same_param() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, true);
        let a = binder.bind(&mut g, &store, w);
        let b = binder.bind(&mut g, &store, w);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = store.add_uniform("w", &[4, 4], 4, &mut rng).unwrap();
        let vals = store.get(w).tensor().data().to_vec();
        assert!(vals.iter().all(|v| v.abs() <= 0.5));

        let mut store2 = ParamStore::new();
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w2 = store2.add_uniform("w", &[4, 4], 4, &mut rng2).unwrap();
        assert_eq!(vals, store2.get(w2).tensor().data());
    }
}
