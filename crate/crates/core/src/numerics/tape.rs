//! Named parameter storage, gradient buffers and the AdamW optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::numerics::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Parameters, their gradients and AdamW moments, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamTape {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
    decay: Vec<bool>,
    step: u64,
}

/// Gradient accumulator shaped like a [`ParamTape`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0]
    }

    /// Two distinct slots at once (weight + bias).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor2, &mut Tensor2) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.slots.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.slots.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.slots.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(Tensor2::is_finite)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let (r, c) = value.shape();
        self.names.push(name);
        self.values.push(value);
        self.grads.push(Tensor2::zeros(r, c));
        self.first.push(Tensor2::zeros(r, c));
        self.second.push(Tensor2::zeros(r, c));
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn from its own RNG stream keyed by `(seed, name)`,
    /// so the draw does not depend on registration order.
    pub fn add_init(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64, decay: bool) -> ParamId {
        let mut t = Tensor2::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => t.fill(1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name));
                let dist = Normal::new(0.0, std).expect("finite std");
                t.data_mut().iter_mut().for_each(|x| *x = dist.sample(&mut rng));
            }
        }
        self.add(name, t, decay)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            slots: self.values.iter().map(|v| Tensor2::zeros(v.rows(), v.cols())).collect(),
        }
    }

    /// Replaces the tape's gradient slots.
    pub fn set_gradients(&mut self, grads: Gradients) -> Result<()> {
        if grads.slots.len() != self.values.len() {
            return Err(IcmError::dim("set_gradients", self.values.len(), grads.slots.len()));
        }
        for (i, g) in grads.slots.iter().enumerate() {
            if g.shape() != self.values[i].shape() {
                return Err(IcmError::dim("set_gradients", self.values[i].shape_str(), g.shape_str()));
            }
        }
        self.grads = grads.slots;
        Ok(())
    }

    /// Clears moments and the step counter ahead of a new training stage.
    pub fn reset_optimizer(&mut self) {
        self.first.iter_mut().chain(self.second.iter_mut()).for_each(|t| t.fill(0.0));
        self.step = 0;
    }

    /// Snapshot of `(name, value)` pairs in registration order.
    pub fn export(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedTensor { name: n.clone(), value: v.clone() })
            .collect()
    }

    /// Overwrites values from a snapshot; names and shapes must match exactly.
    pub fn import(&mut self, params: Vec<NamedTensor>) -> Result<()> {
        if params.len() != self.values.len() {
            return Err(IcmError::Incompatible(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                self.values.len()
            )));
        }
        for (i, p) in params.into_iter().enumerate() {
            if p.name != self.names[i] || p.value.shape() != self.values[i].shape() {
                return Err(IcmError::Incompatible(format!(
                    "parameter {i}: checkpoint has {} {}, model expects {} {}",
                    p.name,
                    p.value.shape_str(),
                    self.names[i],
                    self.values[i].shape_str()
                )));
            }
            if !p.value.is_finite() {
                return Err(IcmError::Data(format!("parameter {} contains non-finite values", p.name)));
            }
            self.values[i] = p.value;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor2,
}

/// FNV-1a over the name, mixed with the seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl AdamW {
    pub fn new(lr: f64, warmup_ratio: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_ratio,
            total_steps,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Linear ramp from 0 over the warmup steps, constant afterwards.
    pub fn effective_lr(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            self.lr * step as f64 / warm as f64
        } else {
            self.lr
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(IcmError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || self.weight_decay < 0.0 {
            return Err(IcmError::Config(format!(
                "warmup_ratio {} must lie in [0,1] and weight_decay {} must be >= 0",
                self.warmup_ratio, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update over the parameters selected by
/// `active`, using the gradients currently stored on the tape. Returns the
/// learning rate that was applied.
pub fn adamw_step(tape: &mut ParamTape, opt: &AdamW, active: impl Fn(&str) -> bool) -> Result<f64> {
    opt.validate()?;
    let lr = opt.effective_lr(tape.step);
    let t = (tape.step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for i in 0..tape.values.len() {
        if !active(&tape.names[i]) {
            continue;
        }
        let wd = if tape.decay[i] { opt.weight_decay } else { 0.0 };
        let g = tape.grads[i].data();
        let m = tape.first[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = opt.beta1 * *mj + (1.0 - opt.beta1) * gj;
        }
        let v = tape.second[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = opt.beta2 * *vj + (1.0 - opt.beta2) * gj * gj;
        }
        let (m, v) = (tape.first[i].data(), tape.second[i].data());
        for (j, p) in tape.values[i].data_mut().iter_mut().enumerate() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + opt.eps) + wd * *p);
        }
    }
    tape.step += 1;
    Ok(lr)
}
