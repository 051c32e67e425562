use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = f64::from(*v as f32);
    }
}

/// Named network parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar counts grouped by the first `depth` dot-separated name components.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            let key: Vec<&str> = name.split('.').take(depth.max(1)).collect();
            *out.entry(key.join(".")).or_insert(0) += t.numel();
        }
        out
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone().with_requires_grad(true))))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient for every parameter, zeros where the loss does not depend on it.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Builds a [`ParameterStore`] layer by layer from a seeded generator.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    pub store: ParameterStore,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParameterStore::new(),
        }
    }

    fn weight(&mut self, name: &str, shape: &[usize], fan_in: f64, zero: bool) -> Result<()> {
        let mut w = if zero {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, (2.0 / fan_in).sqrt(), &mut self.rng)
        };
        round_to_f32(w.data_mut());
        self.store.insert(format!("{name}.weight"), w)
    }

    fn bias(&mut self, name: &str, n: usize) -> Result<()> {
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[n]))
    }

    pub fn conv2d(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, zero: bool) -> Result<()> {
        self.weight(name, &[c_out, c_in, k, k], (c_in * k * k) as f64, zero)?;
        self.bias(name, c_out)
    }

    pub fn conv3d(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, zero: bool) -> Result<()> {
        self.weight(name, &[c_out, c_in, k, k, k], (c_in * k * k * k) as f64, zero)?;
        self.bias(name, c_out)
    }

    /// Transposed conv along depth only; kernel `[c_in, c_out, k, 1, 1]`.
    pub fn conv_t_depth(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<()> {
        let fan_in = (c_in * k) as f64 / stride as f64;
        self.weight(name, &[c_in, c_out, k, 1, 1], fan_in, false)?;
        self.bias(name, c_out)
    }

    pub fn prelu(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.alpha"), Tensor::full(&[c], 0.25))
    }
}
