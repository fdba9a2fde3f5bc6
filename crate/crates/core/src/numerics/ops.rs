//! Forward and analytic backward passes for the fixed primitive set.
//!
//! Every reduction runs left to right in index order so that repeated calls
//! on identical inputs are bit-identical.

use crate::error::{IcmError, Result};
use crate::numerics::tensor::{axpy, dot, Tensor2};

/// `y = x·Wᵀ + b` with `W` stored as `out × in`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: Option<&[f64]>) -> Result<Tensor2> {
    if x.cols() != w.cols() {
        return Err(IcmError::dim("linear", format!("x {}", x.shape_str()), format!("W {}", w.shape_str())));
    }
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(IcmError::dim("linear", format!("W {}", w.shape_str()), format!("b len {}", b.len())));
        }
    }
    let mut y = x.matmul_nt(w)?;
    if let Some(b) = b {
        for i in 0..y.rows() {
            for (yv, bv) in y.row_mut(i).iter_mut().zip(b) {
                *yv += bv;
            }
        }
    }
    Ok(y)
}

/// Accumulates `dW += dyᵀ·x` and `db += Σ_rows dy`.
pub fn linear_backward_params(x: &Tensor2, dy: &Tensor2, dw: &mut Tensor2, db: Option<&mut [f64]>) -> Result<()> {
    dy.matmul_tn_acc(x, dw)?;
    if let Some(db) = db {
        if db.len() != dy.cols() {
            return Err(IcmError::dim("linear_backward", format!("dy {}", dy.shape_str()), format!("db len {}", db.len())));
        }
        for i in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }
    Ok(())
}

/// Parameter gradients plus the input gradient `dx = dy·W`.
pub fn linear_backward(
    x: &Tensor2,
    w: &Tensor2,
    dy: &Tensor2,
    dw: &mut Tensor2,
    db: Option<&mut [f64]>,
) -> Result<Tensor2> {
    linear_backward_params(x, dy, dw, db)?;
    dy.matmul(w)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(IcmError::Domain("softmax of an empty vector".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Vector-Jacobian product of softmax: `dz_i = p_i (dp_i − Σ_k p_k dp_k)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - s)).collect()
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor2,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance. `gamma`/`beta`
/// set to `None` gives the non-affine variant.
pub fn layer_norm(x: &Tensor2, gamma: Option<&[f64]>, beta: Option<&[f64]>, eps: f64) -> Result<(Tensor2, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(IcmError::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.cols();
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if let Some(p) = p {
            if p.len() != n {
                return Err(IcmError::dim("layer_norm", format!("x {}", x.shape_str()), format!("{name} len {}", p.len())));
            }
        }
    }
    let mut xhat = Tensor2::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut y = Tensor2::zeros(x.rows(), n);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..n {
            let g = gamma.map_or(1.0, |g| g[j]);
            let b = beta.map_or(0.0, |b| b[j]);
            yr[j] = xhat.get(i, j) * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `dx`; accumulates into `dgamma`/`dbeta` when present.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: Option<&[f64]>,
    dy: &Tensor2,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) -> Tensor2 {
    let (rows, n) = cache.xhat.shape();
    let mut dx = Tensor2::zeros(rows, n);
    let mut dxhat = vec![0.0; n];
    for i in 0..rows {
        let xh = cache.xhat.row(i);
        let d = dy.row(i);
        for j in 0..n {
            dxhat[j] = d[j] * gamma.map_or(1.0, |g| g[j]);
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[j] += d[j] * xh[j];
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[j] += d[j];
            }
        }
        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dx = dot(&dxhat, xh) / n as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub probs: Tensor2,
    pub scale: f64,
}

/// `softmax(Q·Kᵀ / s)·V`, `s = √width` when `scaled`, else 1.
pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, scaled: bool) -> Result<Tensor2> {
    attention_forward(q, k, v, scaled).map(|(o, _)| o)
}

pub fn attention_forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, scaled: bool) -> Result<(Tensor2, AttentionCache)> {
    if k.rows() > 0 && q.cols() != k.cols() {
        return Err(IcmError::dim("attention", format!("Q {}", q.shape_str()), format!("K {}", k.shape_str())));
    }
    if k.rows() != v.rows() {
        return Err(IcmError::dim("attention", format!("K {}", k.shape_str()), format!("V {}", v.shape_str())));
    }
    let scale = if scaled { (q.cols() as f64).sqrt() } else { 1.0 };
    if k.rows() == 0 {
        let cache = AttentionCache { probs: Tensor2::zeros(q.rows(), 0), scale };
        return Ok((Tensor2::zeros(q.rows(), v.cols()), cache));
    }
    let mut probs = q.matmul_nt(k)?;
    let inv = 1.0 / scale;
    for i in 0..probs.rows() {
        let r = probs.row_mut(i);
        r.iter_mut().for_each(|x| *x *= inv);
        softmax_in_place(r);
    }
    let out = probs.matmul(v)?;
    Ok((out, AttentionCache { probs, scale }))
}

/// Returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    cache: &AttentionCache,
    dout: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    if k.rows() == 0 {
        return Ok((Tensor2::zeros(q.rows(), q.cols()), k.clone(), v.clone()));
    }
    let p = &cache.probs;
    let dv = p.matmul_tn(dout)?;
    let dp = dout.matmul_nt(v)?;
    let mut ds = Tensor2::zeros(p.rows(), p.cols());
    let inv = 1.0 / cache.scale;
    for i in 0..p.rows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let s = dot(pr, dr);
        for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
            *o = pr[j] * (dr[j] - s) * inv;
        }
    }
    let dq = ds.matmul(k)?;
    let dk = ds.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

/// Mean negative log-likelihood over rows and its gradient
/// `(softmax − onehot) / rows`.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != labels.len() {
        return Err(IcmError::dim("cross_entropy", format!("logits {}", logits.shape_str()), format!("{} labels", labels.len())));
    }
    let classes = logits.cols();
    let mut grad = Tensor2::zeros(logits.rows(), classes);
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(IcmError::Data(format!("label {y} out of range for {classes} classes (row {i})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (row[j] - lse).exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Mean squared error over all elements and its gradient.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    if pred.shape() != target.shape() {
        return Err(IcmError::dim("mse", pred.shape_str(), target.shape_str()));
    }
    let n = pred.data().len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(pred.rows(), pred.cols());
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// `out += a * x` for matrices of equal shape.
pub fn add_scaled(out: &mut Tensor2, a: f64, x: &Tensor2) {
    axpy(out.data_mut(), a, x.data());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar probe `Σ c_ij y_ij` with fixed random weights; its gradient wrt y is `c`.
    fn probe(y: &Tensor2, c: &Tensor2) -> f64 {
        dot(y.data(), c.data())
    }

    #[test]
    fn linear_hand_cases() {
        let x = Tensor2::from_rows(&[[1.0, 2.0]]).unwrap();
        let w = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(linear(&x, &w, Some(&[0.0, 0.0])).unwrap().data(), &[1.0, 2.0]);
        let x = Tensor2::from_rows(&[[1.0, 1.0]]).unwrap();
        let w = Tensor2::from_rows(&[[2.0, 3.0]]).unwrap();
        assert_eq!(linear(&x, &w, Some(&[1.0])).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor2::zeros(1, 3);
        let w = Tensor2::zeros(2, 2);
        let msg = linear(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("1x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 5, 4);
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = random(&mut rng, 3, 5);
        let mut dw = Tensor2::zeros(5, 4);
        let mut db = vec![0.0; 5];
        let dx = linear_backward(&x, &w, &c, &mut dw, Some(&mut db)).unwrap();

        let err = finite_diff_check(
            |v| Ok(probe(&linear(&Tensor2::from_vec(3, 4, v.to_vec())?, &w, Some(&b))?, &c)),
            x.data(),
            dx.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dx rel err {err}");
        let err = finite_diff_check(
            |v| Ok(probe(&linear(&x, &Tensor2::from_vec(5, 4, v.to_vec())?, Some(&b))?, &c)),
            w.data(),
            dw.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dW rel err {err}");
        let err = finite_diff_check(|v| Ok(probe(&linear(&x, &w, Some(v))?, &c)), &b, &db, 1e-5).unwrap();
        assert!(err < 1e-6, "db rel err {err}");
    }

    #[test]
    fn softmax_hand_cases() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(IcmError::Domain(_))));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = softmax(&z).unwrap();
        let analytic = softmax_backward(&p, &c);
        let err = finite_diff_check(|v| Ok(dot(&softmax(v)?, &c)), &z, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_hand_cases() {
        let x = Tensor2::from_rows(&[[5.0, 5.0, 5.0]]).unwrap();
        let (y, _) = layer_norm(&x, Some(&[1.0; 3]), Some(&[0.0; 3]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let x = Tensor2::from_rows(&[[-1.0, 1.0]]).unwrap();
        let (y, _) = layer_norm(&x, Some(&[1.0; 2]), Some(&[0.0; 2]), 1e-300).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        assert!(matches!(layer_norm(&x, None, None, 0.0), Err(IcmError::Config(_))));
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 2, 6);
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c = random(&mut rng, 2, 6);
        let (_, cache) = layer_norm(&x, Some(&g), Some(&b), 1e-5).unwrap();
        let mut dg = vec![0.0; 6];
        let mut db = vec![0.0; 6];
        let dx = layer_norm_backward(&cache, Some(&g), &c, Some(&mut dg), Some(&mut db));
        let f = |x: &Tensor2, g: &[f64], b: &[f64]| Ok(probe(&layer_norm(x, Some(g), Some(b), 1e-5)?.0, &c));
        let e1 = finite_diff_check(|v| f(&Tensor2::from_vec(2, 6, v.to_vec())?, &g, &b), x.data(), dx.data(), 1e-5).unwrap();
        let e2 = finite_diff_check(|v| f(&x, v, &b), &g, &dg, 1e-5).unwrap();
        let e3 = finite_diff_check(|v| f(&x, &g, v), &b, &db, 1e-5).unwrap();
        assert!(e1 < 1e-5 && e2 < 1e-5 && e3 < 1e-5, "{e1} {e2} {e3}");
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = Tensor2::from_rows(&[[0.3, -0.2], [1.0, 2.0]]).unwrap();
        let k = Tensor2::from_rows(&[[0.5, 0.5]]).unwrap();
        let v = Tensor2::from_rows(&[[4.0, -1.0, 2.0]]).unwrap();
        let out = attention(&q, &k, &v, true).unwrap();
        assert_eq!(out.row(0), v.row(0));
        assert_eq!(out.row(1), v.row(0));

        let k = Tensor2::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let v = Tensor2::from_rows(&[[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]]).unwrap();
        let out = attention(&q, &k, &v, false).unwrap();
        for i in 0..2 {
            assert!((out.get(i, 0) - 3.0).abs() < 1e-12 && (out.get(i, 1) - 2.0).abs() < 1e-12);
        }

        let out = attention(&q, &Tensor2::zeros(0, 2), &Tensor2::zeros(0, 3), true).unwrap();
        assert_eq!(out.shape(), (2, 3));
        assert!(attention(&q, &Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3), true).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scaled in [true, false] {
            let q = random(&mut rng, 4, 8);
            let k = random(&mut rng, 4, 8);
            let v = random(&mut rng, 4, 8);
            let c = random(&mut rng, 4, 8);
            let (_, cache) = attention_forward(&q, &k, &v, scaled).unwrap();
            let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &c).unwrap();
            let t = |v: &[f64]| Tensor2::from_vec(4, 8, v.to_vec());
            let e1 = finite_diff_check(|x| Ok(probe(&attention(&t(x)?, &k, &v, scaled)?, &c)), q.data(), dq.data(), 1e-5).unwrap();
            let e2 = finite_diff_check(|x| Ok(probe(&attention(&q, &t(x)?, &v, scaled)?, &c)), k.data(), dk.data(), 1e-5).unwrap();
            let e3 = finite_diff_check(|x| Ok(probe(&attention(&q, &k, &t(x)?, scaled)?, &c)), v.data(), dv.data(), 1e-5).unwrap();
            assert!(e1 < 1e-5 && e2 < 1e-5 && e3 < 1e-5, "{e1} {e2} {e3}");
        }
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let (l, _) = cross_entropy(&Tensor2::zeros(1, 3), &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&Tensor2::from_rows(&[[20.0, 0.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!(l < 1e-8);
        assert!(matches!(cross_entropy(&Tensor2::zeros(1, 3), &[3]), Err(IcmError::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random(&mut rng, 5, 4);
        let labels = [0, 3, 1, 1, 2];
        let (_, g) = cross_entropy(&z, &labels).unwrap();
        let err = finite_diff_check(
            |v| Ok(cross_entropy(&Tensor2::from_vec(5, 4, v.to_vec())?, &labels)?.0),
            z.data(),
            g.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
