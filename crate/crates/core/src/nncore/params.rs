use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{NnError, Result, Scalar, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled outside two sigmas.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in a stable insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter initialized from a stream keyed by `(seed, name)`.
    pub fn init(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        seed: u64,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => {
                let mut rng = seed::rng(seed::derive(seed, name));
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break T::from_f64(z * std);
                        }
                    })
                    .collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        self.params[id.0].value.data()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].value.data_mut()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian bytes of every entry.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Flattens every entry into one `f64` vector in parameter order.
    pub fn flatten_f64(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.to_f64_vec())
            .collect()
    }

    /// Inverse of [`flatten_f64`](Self::flatten_f64).
    pub fn assign_flat_f64(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = T::from_f64(flat[off]);
                off += 1;
            }
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }
}

/// Gradient buffers, present only for trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn for_params(ps: &ParameterSet<T>) -> Self {
        Self {
            slots: ps
                .iter()
                .map(|p| p.trainable.then(|| vec![T::zero(); p.value.len()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn slot_mut(&mut self, id: ParamId) -> Option<&mut [T]> {
        self.slots.get_mut(id.0).and_then(|s| s.as_deref_mut())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Ids that hold a gradient buffer.
    pub fn present(&self) -> Vec<ParamId> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|_| ParamId(i)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Flattened gradients in parameter order, zeros where absent.
    pub fn flatten_f64(&self, ps: &ParameterSet<T>) -> Vec<f64> {
        ps.iter()
            .zip(&self.slots)
            .flat_map(|(p, s)| match s {
                Some(g) => g.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                None => vec![0.0; p.value.len()],
            })
            .collect()
    }

    pub fn scale(&mut self, factor: T) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
