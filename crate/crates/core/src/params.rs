//! Named parameter storage, seeded initialization and gradient maps.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::dim_err;
use crate::{Result, Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient per parameter, same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub(crate) fn from_slots(slots: Vec<Option<Tensor<T>>>) -> Self {
        Self { slots }
    }

    /// All-zero gradients shaped like `store`.
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            slots: store.tensors.iter().map(|t| Some(Tensor::zeros(t.shape().to_vec()))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `self += c · other`, slot by slot.
    pub fn add_scaled(&mut self, other: &Self, c: T) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(dim_err!(
                "gradient maps cover {} and {} parameters",
                self.slots.len(),
                other.slots.len()
            ));
        }
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(acc) => {
                    if acc.shape() != theirs.shape() {
                        return Err(dim_err!("gradient shape {:?} vs {:?}", acc.shape(), theirs.shape()));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(theirs.data()) {
                        *a += c * b;
                    }
                }
                None => {
                    let mut t = theirs.clone();
                    t.scale_assign(c);
                    *mine = Some(t);
                }
            }
        }
        Ok(())
    }
}

/// Seeded random initializer shared by all model builders.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("std must be finite and >= 0");
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    /// Glorot-style normal: std = √(2 / (fan_in + fan_out)).
    pub fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let std = num_traits::Float::sqrt(2.0 / (rows + cols) as f64);
        self.normal(&[rows, cols], std)
    }

    /// He-style normal for convolutions: std = √(2 / fan_in).
    pub fn he_conv<T: Scalar>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        let std = num_traits::Float::sqrt(2.0 / (cin * k * k) as f64);
        self.normal(&[cout, cin, k, k], std)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}
