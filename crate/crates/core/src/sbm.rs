//! Scene-balanced mixture: a soft router over the scene experts, the
//! normalized weighted combination, and the router-balance loss.

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::layers::PlainNorm;
use crate::numerics::{softmax, softmax_backward, Gradients, Init, LayerNormCache, ParamId, ParamTape, Tensor2};

pub const NUM_EXPERTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Router {
    pub w: ParamId,
}

impl Router {
    /// Registers `router.w` (`experts × d_model`, no bias).
    pub fn new(tape: &mut ParamTape, experts: usize, d_model: usize, seed: u64) -> Self {
        let w = tape.add_init("router.w", experts, d_model, Init::Normal(0.02), seed, true);
        Self { w }
    }
}

#[derive(Debug, Clone)]
pub struct Gate {
    /// Router input: elementwise mean of the expert outputs.
    pub h: Vec<f64>,
    pub p: Vec<f64>,
}

fn mean_output(outputs: &[&[f64]]) -> Result<Vec<f64>> {
    let width = outputs.first().map(|o| o.len()).unwrap_or(0);
    if outputs.is_empty() || width == 0 {
        return Err(IcmError::Domain("gate needs at least one non-empty expert output".into()));
    }
    let mut h = vec![0.0; width];
    for o in outputs {
        if o.len() != width {
            return Err(IcmError::dim("gate", width, o.len()));
        }
        for (a, b) in h.iter_mut().zip(o.iter()) {
            *a += b;
        }
    }
    let n = outputs.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// `P = softmax(W·h)` with `h` the mean of the expert outputs.
pub fn gate(tape: &ParamTape, router: &Router, outputs: &[&[f64]]) -> Result<Gate> {
    let w = tape.value(router.w);
    if outputs.len() != w.rows() {
        return Err(IcmError::dim("gate", format!("{} experts", w.rows()), format!("{} outputs", outputs.len())));
    }
    let h = mean_output(outputs)?;
    if h.len() != w.cols() {
        return Err(IcmError::dim("gate", format!("router {}", w.shape_str()), format!("h width {}", h.len())));
    }
    let logits: Vec<f64> = (0..w.rows()).map(|j| crate::numerics::dot(w.row(j), &h)).collect();
    let p = softmax(&logits)?;
    Ok(Gate { h, p })
}

/// Accumulates `dW` from `dP` and returns the gradient with respect to the
/// router input `h`. Callers that detach the router input drop it.
pub fn gate_backward(tape: &ParamTape, router: &Router, grads: &mut Gradients, g: &Gate, dp: &[f64]) -> Vec<f64> {
    let dlogits = softmax_backward(&g.p, dp);
    let dw = grads.get_mut(router.w);
    for (j, dl) in dlogits.iter().enumerate() {
        for (d, h) in dw.row_mut(j).iter_mut().zip(&g.h) {
            *d += dl * h;
        }
    }
    let w = tape.value(router.w);
    let mut dh = vec![0.0; g.h.len()];
    for (j, dl) in dlogits.iter().enumerate() {
        crate::numerics::axpy(&mut dh, *dl, w.row(j));
    }
    dh
}

#[derive(Debug, Clone)]
pub struct CombineCache {
    ln: LayerNormCache,
}

/// `LayerNorm(Σ_j P_j · E_j)`.
pub fn combine(tape: &ParamTape, norm: &PlainNorm, outputs: &[&[f64]], p: &[f64]) -> Result<(Vec<f64>, CombineCache)> {
    if outputs.len() != p.len() {
        return Err(IcmError::dim("combine", format!("{} outputs", outputs.len()), format!("{} weights", p.len())));
    }
    let width = outputs.first().map(|o| o.len()).unwrap_or(0);
    let mut mix = vec![0.0; width];
    for (o, &pj) in outputs.iter().zip(p) {
        if o.len() != width {
            return Err(IcmError::dim("combine", width, o.len()));
        }
        for (m, v) in mix.iter_mut().zip(o.iter()) {
            *m += pj * v;
        }
    }
    let (y, ln) = norm.forward(tape, &Tensor2::row_vector(&mix))?;
    Ok((y.into_data(), CombineCache { ln }))
}

/// Returns gradients for each expert output and for `P`.
pub fn combine_backward(
    tape: &ParamTape,
    grads: &mut Gradients,
    norm: &PlainNorm,
    cache: &CombineCache,
    outputs: &[&[f64]],
    p: &[f64],
    dy: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dmix = norm.backward(tape, grads, &cache.ln, &Tensor2::row_vector(dy)).into_data();
    let douts = p.iter().map(|pj| dmix.iter().map(|d| pj * d).collect()).collect();
    let dp = outputs.iter().map(|o| crate::numerics::dot(o, &dmix)).collect();
    (douts, dp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceLossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Normalized expert sizes, `max = 1`.
    pub g: Vec<f64>,
}

impl BalanceLossConfig {
    /// Sizes taken as each expert's internal width over the largest width.
    pub fn from_widths(alpha: f64, beta: f64, widths: &[usize]) -> Result<Self> {
        let max = widths.iter().copied().max().unwrap_or(0);
        if max == 0 || widths.contains(&0) {
            return Err(IcmError::Config(format!("expert widths must be positive, got {widths:?}")));
        }
        let cfg = Self {
            alpha,
            beta,
            g: widths.iter().map(|&w| w as f64 / max as f64).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(IcmError::Config(format!(
                "balance loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BalanceLoss {
    pub entropy_term: f64,
    pub size_term: f64,
    /// Batch-mean gating entropy (before scaling by alpha).
    pub mean_entropy: f64,
    /// `∂L_rb/∂P` per batch row.
    pub dp: Vec<Vec<f64>>,
}

impl BalanceLoss {
    pub fn total(&self) -> f64 {
        self.entropy_term + self.size_term
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `α · mean_b H(P_b) + β · L · Σ_j G_j · mean_b P_bj`.
pub fn router_balance_loss(p_batch: &[Vec<f64>], cfg: &BalanceLossConfig) -> Result<BalanceLoss> {
    cfg.validate()?;
    if p_batch.is_empty() {
        return Err(IcmError::Domain("router balance loss over an empty batch".into()));
    }
    let l = cfg.g.len();
    let b = p_batch.len() as f64;
    let mut mean_entropy = 0.0;
    let mut mass = vec![0.0; l];
    let mut dp = Vec::with_capacity(p_batch.len());
    for row in p_batch {
        if row.len() != l {
            return Err(IcmError::dim("router_balance_loss", l, row.len()));
        }
        mean_entropy -= row.iter().map(|&p| plogp(p)).sum::<f64>();
        for (m, p) in mass.iter_mut().zip(row) {
            *m += p;
        }
        dp.push(
            row.iter()
                .zip(&cfg.g)
                .map(|(&p, g)| -cfg.alpha / b * (p.max(f64::MIN_POSITIVE).ln() + 1.0) + cfg.beta * l as f64 * g / b)
                .collect(),
        );
    }
    mean_entropy /= b;
    let size: f64 = mass.iter().zip(&cfg.g).map(|(m, g)| g * m / b).sum();
    Ok(BalanceLoss {
        entropy_term: cfg.alpha * mean_entropy,
        size_term: cfg.beta * l as f64 * size,
        mean_entropy,
        dp,
    })
}
