//! Named trainable parameters and their accumulated gradients.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Every trainable tensor of a model, addressable by id and by dotted name
/// (`lab.lum.mhsa.wq`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
    grads_ready: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            grads_ready: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        let id = self.id(name)?;
        Some(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sum of scalar weights whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// True once `accumulate` ran since the last `zero_grad`.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        self.grads_ready = false;
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
        self.grads_ready = true;
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }

    /// Copy with a different element type; used for 64-bit gradient checks.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            grads_ready: self.grads_ready,
        }
    }

    /// Flattened parameter values in registration order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<T: Scalar>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(self.rng.random_range(-bound..bound)))
    }

    /// Kernel `kh x kw x cin x cout`.
    pub fn conv<T: Scalar>(&mut self, k: usize, cin: usize, cout: usize) -> Tensor<T> {
        self.xavier(&[k, k, cin, cout], k * k * cin, k * k * cout)
    }

    pub fn linear<T: Scalar>(&mut self, din: usize, dout: usize) -> Tensor<T> {
        self.xavier(&[din, dout], din, dout)
    }

    pub fn depthwise<T: Scalar>(&mut self, k: usize, c: usize) -> Tensor<T> {
        self.xavier(&[k, k, c], k * k, k * k)
    }
}
