use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a parameter array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays with paired gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        let (r, c) = value.shape();
        self.names.push(name);
        self.values.push(value);
        self.grads.push(Matrix::zeros(r, c));
        self.first_moment.push(Matrix::zeros(r, c));
        self.second_moment.push(Matrix::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    /// Uniform fan-in initialised weight matrix, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_fan_in<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Rounds every parameter to single precision so that an in-memory model
    /// matches one reloaded from a checkpoint bit for bit.
    pub fn freeze(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Copies parameter values from `other` (same layout) into `self`.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    /// Polyak averaging: `self ← (1 - rate)·self + rate·other`.
    pub fn soft_update_from(&mut self, other: &ParamStore, rate: f64) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
    }

    /// Applies one bias-corrected Adam update from the accumulated gradients and
    /// clears them. Fails without touching any parameter if a gradient is non-finite.
    pub fn adam_step(&mut self, adam: &Adam) -> Result<()> {
        for (name, g) in self.names.iter().zip(&self.grads) {
            if !g.all_finite() {
                return Err(Error::NonFinite { what: format!("gradient of `{name}`"), step: self.step as usize + 1 });
            }
        }
        self.step += 1;
        for i in 0..self.values.len() {
            adam_update(
                self.values[i].data_mut(),
                self.grads[i].data(),
                self.first_moment[i].data_mut(),
                self.second_moment[i].data_mut(),
                adam,
                self.step,
            );
        }
        self.zero_grad();
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on a flat array. `t` is the 1-based step count.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], adam: &Adam, t: u64) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - adam.beta1.powi(t as i32);
    let bc2 = 1.0 - adam.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g;
        v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
    }
}
