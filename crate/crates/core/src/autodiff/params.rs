//! Named trainable parameters, their group tags, and scoped gradient
//! extraction.
//!
//! Parameters live outside any tape in a [`ParamStore`]; each training step
//! binds them into a fresh tape as trainable leaves, runs one backward pass
//! per loss, and pulls gradients back out filtered by [`ParamGroup`]. That
//! implements the per-objective scoping by masking at accumulation time:
//! activations always flow forward, only the extracted updates differ.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Disjoint partition of the trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    EncoderBelowMg,
    EncoderMgAndAbove,
    ClassifierHead,
    Generator,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::EncoderBelowMg,
        ParamGroup::EncoderMgAndAbove,
        ParamGroup::ClassifierHead,
        ParamGroup::Generator,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncoderBelowMg => "encoder-below-mg",
            ParamGroup::EncoderMgAndAbove => "encoder-mg-and-above",
            ParamGroup::ClassifierHead => "classifier-head",
            ParamGroup::Generator => "generator",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, ParamGroup::EncoderBelowMg | ParamGroup::EncoderMgAndAbove)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: ParamGroup,
}

/// Registry of all trainable tensors, in registration order. Iteration is
/// always over the insertion-ordered Vec so numeric paths stay
/// deterministic; the map is a name lookup only.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<T>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {}", name)));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("register", format!("{}: {:?}", name, shape)));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, group });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut_entries(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Copy of every buffer, aligned with entry order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| e.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot from a different model");
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.data.copy_from_slice(s);
        }
    }

    /// Push every parameter into `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Binding> {
        let mut nodes = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            nodes.push(tape.leaf(e.data.clone(), e.shape.clone(), true)?);
        }
        Ok(Binding { nodes })
    }

    /// Gradient of the last backward pass on `tape`, restricted to
    /// `groups`: everything outside gets exact zeros.
    pub fn extract_grads(&self, tape: &Tape<T>, binding: &Binding, groups: &[ParamGroup]) -> Gradients<T> {
        let mut by_param = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if groups.contains(&e.group) {
                by_param.push(tape.grad(binding.nodes[i]));
            } else {
                by_param.push(vec![T::zero(); e.data.len()]);
            }
        }
        Gradients { by_param }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { by_param: self.entries.iter().map(|e| vec![T::zero(); e.data.len()]).collect() }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Node ids of one `bind` call, aligned with the store's entry order.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn all_nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Per-parameter gradient buffers aligned with a store's entries.
pub struct Gradients<T> {
    by_param: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.by_param[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.by_param.iter()
    }

    /// self += scale · other, elementwise.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: f64) {
        let s = T::from_f64(scale);
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.by_param {
            for &v in p {
                let x = v.to_f64();
                sq += x * x;
            }
        }
        sq.sqrt()
    }

    /// Scale all buffers so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::from_f64(max_norm / norm);
            for p in self.by_param.iter_mut() {
                for v in p.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

// ── initializers ────────────────────────────────────────────────────────

/// Normal(0, std²) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    (0..n)
        .map(|_| {
            loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect()
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
}

pub fn zeros<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

pub fn ones<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one(); n]
}
