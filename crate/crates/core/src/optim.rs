//! Named parameters, initialization and the Nesterov-momentum SGD step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            gradient: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
        }
    }
}

/// Owns every learned tensor of a model; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform on `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(T::zero());
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    gradient: p.gradient.cast(),
                    velocity: p.velocity.cast(),
                })
                .collect(),
        }
    }
}

/// SGD hyperparameters: momentum, coupled L2 decay and a per-epoch multiplicative
/// learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_epoch_decay: f64,
    /// Rescale the gradient of a step so its global L2 norm is at most this. Off when
    /// `None`.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_epoch_decay: 0.03,
            grad_clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate0 > 0.0 && self.learning_rate0.is_finite()) {
            return Err(Error::config("learning_rate0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.lr_epoch_decay) {
            return Err(Error::config("lr_epoch_decay must lie in [0, 1)"));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        Ok(())
    }

    /// `learning_rate0 * (1 - lr_epoch_decay)^epoch`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.learning_rate0 * (1.0 - self.lr_epoch_decay).powi(epoch as i32)
    }
}

/// Global L2 norm of all gradients in `store`.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .params
        .iter()
        .flat_map(|p| p.gradient.data().iter())
        .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Scale every gradient by `max_norm / norm` when the global norm exceeds `max_norm`.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) {
    let norm = grad_norm(store);
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for p in &mut store.params {
            p.gradient.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// One Nesterov step over every parameter, then zero the gradients.
///
/// `g = grad + wd*w; v = mu*v + g; w -= lr*(g + mu*v)`, with `grad` clipped first when
/// the config asks for it. A NaN gradient anywhere aborts before any parameter is touched.
pub fn sgd_nesterov_step<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| p.gradient.has_nan()) {
        return Err(Error::Numeric(format!("NaN gradient in {}", p.name)));
    }
    if let Some(max_norm) = config.grad_clip_norm {
        clip_grad_norm(store, max_norm);
    }
    let lr = T::from_f64(config.learning_rate(epoch));
    let mu = T::from_f64(config.momentum);
    let wd = T::from_f64(config.weight_decay);
    for p in &mut store.params {
        let Parameter {
            value,
            gradient,
            velocity,
            ..
        } = p;
        for ((w, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(gradient.data_mut().iter_mut())
            .zip(velocity.data_mut().iter_mut())
        {
            let gg = *g + wd * *w;
            *v = mu * *v + gg;
            *w -= lr * (gg + mu * *v);
            *g = T::zero();
        }
    }
    Ok(())
}
