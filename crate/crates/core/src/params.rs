//! Named parameter storage, freeze control and initialisers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable (or frozen) tensor with a dotted name path such as
/// `stage1.block0.attn.qkv.w`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

static NEXT_UID: AtomicU64 = AtomicU64::new(0);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Ordered collection of parameters. Insertion order is the checkpoint order.
///
/// Every store (clones included) carries a process-unique id so one tape can
/// read parameters from several stores without mixing them up.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: next_uid(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
            frozen: false,
        });
        Ok(ParamId(id))
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Sets `frozen` on every parameter to `pred(name)`.
    pub fn set_frozen_by(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = pred(&p.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen_by(|_| true);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Gives every trainable parameter that received no gradient an explicit
    /// zero gradient, for losses that legitimately do not reach all of them.
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen && p.tensor.grad.is_none()) {
            p.tensor.grad = Some(vec![0.0; p.tensor.numel()]);
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Sum of element counts over parameters whose names satisfy `pred`.
    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Overwrites the value of `name` (shape must match).
    pub fn set_value(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.tensor.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{name}: stored {:?}, given {:?}", p.tensor.shape(), value.shape()),
            ));
        }
        p.tensor.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Copies every parameter of `src` accepted by `pred` whose name also
    /// exists here. Returns the number copied.
    pub fn copy_matching_from(&mut self, src: &ParamStore, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for p in src.params.iter().filter(|p| pred(&p.name)) {
            if self.index.contains_key(&p.name) {
                self.set_value(&p.name, &p.tensor)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Value snapshot keyed by name, for before/after audits.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
            .collect()
    }
}

/// Weight initialisers. All draw from the caller's RNG so a single seed
/// determines the whole model.
pub mod init {
    use super::*;

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// `[n, n]` identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }
}
