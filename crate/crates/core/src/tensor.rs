//! Dense 64-bit tensors, channel-major feature maps and named parameter stores.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// A `channels x height x width` activation grid stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Empty("feature map"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "feature map",
                format!(
                    "{channels}x{height}x{width} needs {} entries, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Mirror every channel left-to-right.
    pub fn flip_horizontal(&self) -> FeatureMap {
        FeatureMap::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.at(c, y, self.width - 1 - x)
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            &[c, h, w] => FeatureMap::new(c, h, w, t.data.clone()),
            other => Err(Error::shape(
                "feature map",
                format!("expected rank-3 tensor, got shape {other:?}"),
            )),
        }
    }
}

/// Handle to one entry of a [`BlockParams`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulators aligned index-for-index with a [`BlockParams`] store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    slots: Vec<Tensor>,
}

impl GradStore {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0].data
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].data
    }

    pub fn zero(&mut self) {
        self.slots.iter_mut().for_each(|t| t.fill(0.0));
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.slots {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }
}

/// Ordered map of named parameter tensors plus same-shaped gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    entries: IndexMap<String, Tensor>,
    grads: GradStore,
}

impl Default for BlockParams {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockParams {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            grads: GradStore { slots: Vec::new() },
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.grads.slots.push(Tensor::zeros(&value.shape));
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(ParamId(idx))
    }

    /// Register a Glorot-uniform initialized weight.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn grads(&self) -> &GradStore {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut GradStore {
        &mut self.grads
    }

    /// A fresh zeroed accumulator with this store's layout.
    pub fn zero_grads_like(&self) -> GradStore {
        GradStore {
            slots: self.entries.values().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    /// Run `f` with read-only values and this store's own accumulators.
    pub fn with_grads<R>(&mut self, f: impl FnOnce(&BlockParams, &mut GradStore) -> R) -> R {
        let mut grads = std::mem::take(&mut self.grads);
        let out = f(self, &mut grads);
        self.grads = grads;
        out
    }

    /// Replace every value whose name appears in `other`, checking shapes.
    pub fn load_from(&mut self, other: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, t) in other {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if slot.shape != t.shape {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "parameter `{name}` has shape {:?} in the model but {:?} in the checkpoint",
                        slot.shape, t.shape
                    ),
                ));
            }
            slot.data.copy_from_slice(&t.data);
        }
        for name in self.entries.keys() {
            if !other.contains_key(name) {
                return Err(Error::shape(
                    "checkpoint",
                    format!("checkpoint lacks parameter `{name}`"),
                ));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &IndexMap<String, Tensor> {
        &self.entries
    }
}
