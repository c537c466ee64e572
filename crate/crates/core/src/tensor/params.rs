use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to one tensor inside a [`ParamSet`]. Clones of a set keep the same
/// tag, so gradients computed against a snapshot apply to the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    set: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone)]
pub struct ParamSet {
    tag: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = true;
        let index = self.tensors.len();
        self.lookup.insert(name.clone(), index);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.id_at(index))
    }

    fn id_at(&self, index: usize) -> ParamId {
        ParamId {
            set: self.tag,
            index: index as u32,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.set == self.tag && id.index() < self.tensors.len()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| self.id_at(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        debug_assert!(self.owns(id), "parameter id from another set");
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert!(self.owns(id), "parameter id from another set");
        &mut self.tensors[id.index()]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(|i| self.id_at(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds `grads` into the `grad` buffers of this set's tensors. Entries for
    /// other sets are ignored. Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            if !self.owns(*id) {
                continue;
            }
            let t = &mut self.tensors[id.index()];
            match t.grad.as_mut() {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                None => t.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Name of the parameter holding the largest-magnitude gradient entry.
    pub fn max_grad_param(&self) -> Option<&str> {
        let mut best: Option<(f64, usize)> = None;
        for (i, t) in self.tensors.iter().enumerate() {
            if let Some(g) = &t.grad {
                for x in g {
                    let a = if x.is_finite() {
                        x.abs()
                    } else {
                        f64::INFINITY
                    };
                    if best.is_none_or(|(b, _)| a > b) {
                        best = Some((a, i));
                    }
                }
            }
        }
        best.map(|(_, i)| self.names[i].as_str())
    }

    /// SHA-256 over names, shapes and raw value bits, in insertion order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        crate::util::hex(&h.finalize())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub(crate) fn buffer(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.map.entry(id).or_insert_with(|| vec![0.0; len])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise sum, used to merge per-example gradients.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }
}
