use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Real, Rng, Tensor};
use crate::{Error, Result};

/// Initialization scheme for one named parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`, for dense kernels.
    GlorotUniform,
    /// `U(-0.05, 0.05)`, for embedding tables.
    EmbeddingUniform,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }
}

/// A trainable tensor together with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named trainable parameters in insertion order plus the optimizer step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    step: u64,
}

/// Gradients keyed by parameter name.
pub type GradStore<T> = IndexMap<String, Tensor<T>>;

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        self.params.insert(name, Param { value, m, v });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

/// Allocates and initializes every parameter in `specs`, drawing in spec order.
pub fn init_params<T: Real>(specs: &[ParamSpec], rng: &mut Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::EmbeddingUniform => (0..n)
                .map(|_| T::from_f64_lossy(rng.uniform_range(-0.05, 0.05)))
                .collect(),
            Init::GlorotUniform => {
                let bound = glorot_bound(&spec.shape);
                (0..n)
                    .map(|_| T::from_f64_lossy(rng.uniform_range(-bound, bound)))
                    .collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// `sqrt(6 / (fan_in + fan_out))` for a `(fan_in, fan_out)` kernel.
pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [.., a, b] => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            (a * receptive, b * receptive)
        }
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// The step counter is incremented before the bias correction is computed.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &GradStore<T>, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in &store.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name:?}")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    for (name, p) in store.params.iter_mut() {
        let g = grads[name.as_str()].data();
        let Param { value, m, v } = p;
        for (((w, m), v), &g) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
