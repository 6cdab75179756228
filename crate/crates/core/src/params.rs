//! Named learnable tensors, their binding into a [`Graph`], and the Adam
//! optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. Optimizer steps and
/// gradient tracking are selected per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    GlobalCodebook,
    LocalCodebook,
    Transformer,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Parameters in registration order. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param_set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// Tensor with entries drawn uniformly from `[-bound, bound)`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Lazily inserts parameters into a graph as leaves the first time they
/// are used, so each leaf sits right before its first consumer. Only
/// parameters in `trainable` groups require gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<ParamGroup>,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        Self {
            store,
            trainable: trainable.to_vec(),
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.store.get(id);
        let v = g.leaf(p.value.clone(), self.trainable.contains(&p.group))?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Bound parameters that track gradients, in registration order.
    pub fn trainable_bindings(&self, g: &Graph) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|&(_, v)| g.requires_grad(v))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction. Moments are created on a parameter's first
/// update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            steps: 0,
            moments: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update for each `(param, gradient)` pair.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, grad) in grads {
            let value = store.value_mut(*id);
            if value.shape() != grad.shape() {
                return Err(Error::shape("adam", value.shape(), grad.shape()));
            }
            let n = value.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: id.0,
                    op: "adam_update",
                });
            }
        }
        Ok(())
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments[id.0]
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Restores optimizer state saved from [`Adam::moments`] and
    /// [`Adam::steps`].
    pub fn restore(&mut self, steps: u64, moments: Vec<Option<(Vec<f64>, Vec<f64>)>>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::invalid(
                "adam_restore",
                format!("{} moment slots for {} params", moments.len(), self.moments.len()),
            ));
        }
        self.steps = steps;
        self.moments = moments;
        Ok(())
    }
}
