//! Parameter handles for the small set of learned layers, with forward and
//! backward helpers that read values from a [`ParamTape`] and write into a
//! [`Gradients`] buffer.

use crate::error::Result;
use crate::numerics::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, linear_backward_params, Gradients,
    Init, LayerNormCache, ParamId, ParamTape, Tensor2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Registers `name.w` (`out × in`, Gaussian with `std`) and `name.b` (zeros).
    pub fn new(tape: &mut ParamTape, name: &str, input: usize, output: usize, std: f64, seed: u64) -> Self {
        let w = tape.add_init(&format!("{name}.w"), output, input, Init::Normal(std), seed, true);
        let b = tape.add_init(&format!("{name}.b"), 1, output, Init::Zeros, seed, false);
        Self { w, b }
    }

    /// Default scale `1/√fan_in`.
    pub fn standard(tape: &mut ParamTape, name: &str, input: usize, output: usize, seed: u64) -> Self {
        Self::new(tape, name, input, output, 1.0 / (input as f64).sqrt(), seed)
    }

    pub fn forward(&self, tape: &ParamTape, x: &Tensor2) -> Result<Tensor2> {
        linear(x, tape.value(self.w), Some(tape.value(self.b).data()))
    }

    pub fn backward(&self, tape: &ParamTape, grads: &mut Gradients, x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
        let (dw, db) = grads.pair_mut(self.w, self.b);
        linear_backward(x, tape.value(self.w), dy, dw, Some(db.data_mut()))
    }

    pub fn backward_params(&self, grads: &mut Gradients, x: &Tensor2, dy: &Tensor2) -> Result<()> {
        let (dw, db) = grads.pair_mut(self.w, self.b);
        linear_backward_params(x, dy, dw, Some(db.data_mut()))
    }

    pub fn input_width(&self, tape: &ParamTape) -> usize {
        tape.value(self.w).cols()
    }

    pub fn output_width(&self, tape: &ParamTape) -> usize {
        tape.value(self.w).rows()
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Affine layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(tape: &mut ParamTape, name: &str, width: usize, seed: u64) -> Self {
        let gamma = tape.add_init(&format!("{name}.g"), 1, width, Init::Ones, seed, false);
        let beta = tape.add_init(&format!("{name}.b"), 1, width, Init::Zeros, seed, false);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &ParamTape, x: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
        layer_norm(x, Some(tape.value(self.gamma).data()), Some(tape.value(self.beta).data()), LN_EPS)
    }

    pub fn backward(&self, tape: &ParamTape, grads: &mut Gradients, cache: &LayerNormCache, dy: &Tensor2) -> Tensor2 {
        let (dg, db) = grads.pair_mut(self.gamma, self.beta);
        layer_norm_backward(cache, Some(tape.value(self.gamma).data()), dy, Some(dg.data_mut()), Some(db.data_mut()))
    }
}

/// Non-affine layer normalization, optionally with learned gamma/beta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlainNorm {
    pub affine: Option<Norm>,
}

impl PlainNorm {
    pub fn forward(&self, tape: &ParamTape, x: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
        match &self.affine {
            Some(n) => n.forward(tape, x),
            None => layer_norm(x, None, None, LN_EPS),
        }
    }

    pub fn backward(&self, tape: &ParamTape, grads: &mut Gradients, cache: &LayerNormCache, dy: &Tensor2) -> Tensor2 {
        match &self.affine {
            Some(n) => n.backward(tape, grads, cache, dy),
            None => layer_norm_backward(cache, None, dy, None, None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// `linear → activation → linear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Tensor2,
    pre: Tensor2,
    act: Tensor2,
}

impl FeedForward {
    pub fn forward(&self, tape: &ParamTape, x: &Tensor2) -> Result<(Tensor2, FeedForwardCache)> {
        let pre = self.up.forward(tape, x)?;
        let act = pre.map(|v| self.activation.apply(v));
        let out = self.down.forward(tape, &act)?;
        Ok((
            out,
            FeedForwardCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, tape: &ParamTape, grads: &mut Gradients, cache: &FeedForwardCache, dy: &Tensor2) -> Result<Tensor2> {
        let mut dact = self.down.backward(tape, grads, &cache.act, dy)?;
        for (d, p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= self.activation.grad(*p);
        }
        self.up.backward(tape, grads, &cache.input, &dact)
    }
}
