//! Named parameter storage with seeded, reproducible initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{DiffArray, NodeId, Real, Result, Tape, TensorError};

/// Initialization scheme for one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

/// Map from dot-separated parameter path to tensor. Identical seed and
/// registration sequence produce bit-identical values: every parameter draws
/// from its own stream keyed by `seed` and the path hash.
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, path: &str, shape: Vec<usize>, init: ParamInit) {
        assert!(
            !self.params.contains_key(path),
            "duplicate parameter path {path}"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            ParamInit::Zeros => vec![T::zero(); n],
            ParamInit::Ones => vec![T::one(); n],
            ParamInit::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha12Rng::seed_from_u64(splitmix(self.seed ^ fnv1a(path)));
                (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
                    .collect()
            }
        };
        self.params.insert(
            path.to_string(),
            Param {
                shape,
                data,
                grad: None,
            },
        );
    }

    pub fn get(&self, path: &str) -> Result<&Param<T>> {
        self.params
            .get(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    /// Iterate parameters in path order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Sorted (path, shape) listing.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape.clone()))
            .collect()
    }

    /// Put the parameter on a tape as a grad-requiring leaf, reusing the
    /// existing leaf if this tape already bound the path (so shared weights
    /// accumulate into one node).
    pub fn leaf_on(&self, tape: &mut Tape<T>, path: &str) -> Result<NodeId> {
        if let Some((id, _)) = tape.bindings().iter().find(|(_, p)| p == path) {
            return Ok(*id);
        }
        let p = self.get(path)?;
        let id = tape.leaf(DiffArray {
            shape: p.shape.clone(),
            data: p.data.clone(),
            grad: None,
            requires_grad: true,
        });
        tape.bind(id, path);
        Ok(id)
    }

    /// Accumulate the tape's parameter gradients into the store.
    pub fn absorb_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for (id, path) in tape.bindings() {
            let Some(node_grad) = tape.grad(*id) else {
                continue;
            };
            let param = self.get_mut(path)?;
            let grad = param
                .grad
                .get_or_insert_with(|| vec![T::zero(); node_grad.len()]);
            for (g, &s) in grad.iter_mut().zip(node_grad) {
                *g += s;
            }
        }
        Ok(())
    }

    /// Extract this tape's parameter gradients without touching the store
    /// (for deterministic reduction over a parallel batch).
    pub fn grads_of(tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (id, path) in tape.bindings() {
            if let Some(g) = tape.grad(*id) {
                out.insert(path.clone(), g.to_vec());
            }
        }
        out
    }

    /// Add a gradient map (from [`ParamStore::grads_of`]) into the store.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (path, g) in grads {
            let param = self.get_mut(path)?;
            let grad = param.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (t, &s) in grad.iter_mut().zip(g) {
                *t += s;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Scale all pending gradients (e.g. averaging over a batch).
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= f;
                }
            }
        }
    }

    /// Convert precision (used when loading f32 files into f64 oracles).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new(self.seed);
        for (path, p) in &self.params {
            out.params.insert(
                path.clone(),
                Param {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    grad: None,
                },
            );
        }
        out
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
