//! Named parameter storage shared by the model, the optimizer and the
//! weight archive.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Trainable parameter (as opposed to a running-statistics buffer).
    pub trainable: bool,
}

impl ParamSpec {
    fn new(name: &str, shape: &[usize], init: Init, trainable: bool) -> Self {
        ParamSpec {
            name: name.to_owned(),
            shape: shape.to_vec(),
            init,
            trainable,
        }
    }

    pub fn weight(name: &str, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::TruncNormal, true)
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Zeros, true)
    }

    pub fn ones(name: &str, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Ones, true)
    }

    pub fn buffer_zeros(name: &str, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Zeros, false)
    }

    pub fn buffer_ones(name: &str, shape: &[usize]) -> Self {
        Self::new(name, shape, Init::Ones, false)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Fresh value. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so a tensor's initial value does not depend on which
    /// other tensors exist.
    pub fn initialize<T: Real>(&self, seed: u64) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::TruncNormal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(self.name.as_bytes()));
                Tensor::trunc_normal(&self.shape, INIT_STD, &mut rng)
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .map(|s| (s.name.clone(), s.initialize(seed)))
            .collect();
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_owned()]))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_owned()]))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter().filter(|(n, _)| !is_buffer_name(n))
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Register every trainable tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .trainable()
            .map(|(n, t)| (n.clone(), g.param(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Graph handles of bound parameters, looked up by canonical name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensors(vec![name.to_owned()]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
