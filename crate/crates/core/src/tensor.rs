//! Dense tensors and the named parameter store shared by every model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the uniform initialisation range for weight matrices.
pub const INIT_SCALE: f64 = 0.08;

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform draw in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimisation group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Encoder, compressor, pointer attention and the forced-attention head.
    Compression,
    /// Decoder, decoder attention and output projection.
    Reconstruction,
    /// Learned scalar baseline and the input-dependent baseline MLP.
    Baseline,
    /// Language-model prior.
    Prior,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Compression,
        Group::Reconstruction,
        Group::Baseline,
        Group::Prior,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Group::Compression => 0,
            Group::Reconstruction => 1,
            Group::Baseline => 2,
            Group::Prior => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Owns every trainable array of a model. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    init_scale: f64,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            init_scale: INIT_SCALE,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store whose [`add_uniform`](Self::add_uniform) draws from `[-scale, scale]`.
    pub fn with_init_scale(scale: f64) -> Self {
        ParamStore {
            params: Vec::new(),
            init_scale: scale,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        id
    }

    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        self.add(name, group, Tensor::uniform(shape, self.init_scale, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].group == group)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Concatenated values of the given parameters, in order.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.get(id).data().iter().copied())
            .collect()
    }
}

/// Gradient accumulators, one per parameter, shaped like the store.
///
/// Backward passes add into it; nothing is cleared until [`GradStore::zero`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn new(params: &ParamStore) -> Self {
        GradStore {
            grads: params
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, values: &[f64]) {
        for (g, v) in self.grads[id.0].data_mut().iter_mut().zip(values) {
            *g += v;
        }
    }

    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|&id| self.grads[id.0].data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.grads[id.0].data().iter().copied())
            .collect()
    }

    /// True when every listed accumulator is exactly zero.
    pub fn is_zero(&self, ids: &[ParamId]) -> bool {
        ids.iter()
            .all(|&id| self.grads[id.0].data().iter().all(|&v| v == 0.0))
    }
}
