//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{IcmError, Result};
use crate::numerics::tape::{Gradients, ParamTape};

/// Denominator floor for the relative error. Below this magnitude the check
/// degrades to an absolute test at `tol * FLOOR`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = x[i];
    x[i] = orig + eps;
    let plus = f(x)?;
    x[i] = orig - eps;
    let minus = f(x)?;
    x[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(IcmError::Numeric(format!("non-finite function value at coordinate {i}")));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x`, over every coordinate.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(IcmError::dim("finite_diff_check", x.len(), analytic.len()));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let num = central_difference(&mut f, &mut probe, i, eps)?;
        worst = worst.max(relative_error(analytic[i], num));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
}

/// Checks every parameter tensor on the tape. At most `per_group` entries of
/// each tensor are probed (chosen by `seed`); `None` probes all of them.
pub fn check_tape<F>(
    tape: &mut ParamTape,
    mut loss: F,
    analytic: &Gradients,
    eps: f64,
    per_group: Option<usize>,
    seed: u64,
) -> Result<Vec<GroupCheck>>
where
    F: FnMut(&ParamTape) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tape.len());
    let ids: Vec<_> = tape.ids().collect();
    for id in ids {
        let total = tape.value(id).data().len();
        let picks: Vec<usize> = match per_group {
            Some(k) if k < total => {
                let mut v = sample(&mut rng, total, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = tape.value(id).data()[i];
            tape.value_mut(id).data_mut()[i] = orig + eps;
            let plus = loss(tape);
            tape.value_mut(id).data_mut()[i] = orig - eps;
            let minus = loss(tape);
            tape.value_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(IcmError::Numeric(format!("non-finite loss probing {}[{i}]", tape.name(id))));
            }
            let num = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.get(id).data()[i], num));
        }
        out.push(GroupCheck {
            name: tape.name(id).to_string(),
            checked: picks.len(),
            total,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
