//! Implicit-enhanced causal block. A segment's expert outputs `X` are mapped
//! to mediator tokens `M`; a self-sampling attention reads `M`, a
//! cross-sampling attention reads a frozen K-means dictionary of pooled
//! training representations, and a feed-forward layer fuses the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::layers::{Activation, FeedForward, FeedForwardCache, Linear};
use crate::numerics::{attention_backward, attention_forward, AttentionCache, Gradients, ParamTape, Tensor2};
use crate::sig17;

pub const DEFAULT_DICTIONARY_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryProvenance {
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub points: usize,
    pub iterations: usize,
    pub inertia: f64,
    #[serde(with = "sig17::vector")]
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDictionary {
    #[serde(with = "sig17::matrix")]
    pub centroids: Tensor2,
    pub provenance: DictionaryProvenance,
}

impl GlobalDictionary {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn width(&self) -> usize {
        self.centroids.cols()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &Tensor2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &Tensor2, k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let n = points.rows();
    let mut centroids = Tensor2::zeros(k, points.cols());
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            while d2[idx] == 0.0 {
                idx -= 1;
            }
            idx
        } else {
            // Every remaining point coincides with a centroid.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until every centroid moves
/// less than `tol` or `max_iters` is reached. Inertia is recorded after each
/// assignment step.
pub fn kmeans(points: &Tensor2, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GlobalDictionary> {
    let n = points.rows();
    if k == 0 {
        return Err(IcmError::Config("kmeans needs K >= 1".into()));
    }
    if n < k {
        return Err(IcmError::Data(format!("kmeans needs at least K={k} points, got {n}")));
    }
    if !points.is_finite() {
        return Err(IcmError::Data("kmeans input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            assign[i] = c;
            dist[i] = d;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                dist[i] = 0.0;
                centroids.row_mut(c).copy_from_slice(points.row(i));
            }
        }
        history.push(dist.iter().sum());
        let mut next = Tensor2::zeros(k, points.cols());
        for i in 0..n {
            for (a, b) in next.row_mut(assign[i]).iter_mut().zip(points.row(i)) {
                *a += b;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            next.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            shift = shift.max(sq_dist(next.row(c), centroids.row(c)).sqrt());
        }
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let inertia: f64 = (0..n).map(|i| nearest(points.row(i), &centroids).1).sum();
    Ok(GlobalDictionary {
        centroids,
        provenance: DictionaryProvenance {
            dataset_hash: None,
            seed,
            points: n,
            iterations,
            inertia,
            inertia_history: history,
        },
    })
}

/// Mean silhouette coefficient of `points` under integer `labels`.
pub fn silhouette(points: &Tensor2, labels: &[usize]) -> Result<f64> {
    if points.rows() != labels.len() {
        return Err(IcmError::dim("silhouette", points.rows(), labels.len()));
    }
    let groups = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..points.rows() {
        let mut sum = vec![0.0; groups];
        let mut cnt = vec![0usize; groups];
        for j in 0..points.rows() {
            if i != j {
                sum[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..groups)
            .filter(|&g| g != own && cnt[g] > 0)
            .map(|g| sum[g] / cnt[g] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            total += if m > 0.0 { (b - a) / m } else { 0.0 };
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(IcmError::Data("silhouette needs at least two populated groups".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IecConfig {
    pub d_model: usize,
    pub attention_scaled: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct IecParams {
    pub config: IecConfig,
    mediator: Linear,
    p: Linear,
    q: Linear,
    k_m: Linear,
    v_m: Linear,
    k_c: Linear,
    v_c: Linear,
    ffn: FeedForward,
}

/// Dictionary keys and values, projected once per batch.
#[derive(Debug, Clone)]
pub struct CrossMemory {
    centroids: Tensor2,
    pub keys: Tensor2,
    pub values: Tensor2,
}

/// Gradient accumulator for [`CrossMemory`] keys and values.
#[derive(Debug, Clone)]
pub struct CrossMemoryGrad {
    dk: Tensor2,
    dv: Tensor2,
}

#[derive(Debug, Clone)]
pub struct SelfCache {
    tokens: Tensor2,
    pooled: Tensor2,
    mediator: Tensor2,
    query: Tensor2,
    keys: Tensor2,
    values: Tensor2,
    attn: AttentionCache,
}

#[derive(Debug, Clone)]
pub struct CrossCache {
    pooled: Tensor2,
    query: Tensor2,
    attn: AttentionCache,
}

#[derive(Debug, Clone)]
pub struct IecCache {
    self_side: SelfCache,
    cross: CrossCache,
    ffn: FeedForwardCache,
}

#[derive(Debug, Clone)]
pub struct IecOutput {
    pub y_m: Vec<f64>,
    pub y_x: Vec<f64>,
    pub y: Vec<f64>,
    pub cache: IecCache,
}

fn pool(tokens: &Tensor2) -> Tensor2 {
    tokens.mean_rows()
}

fn spread_pooled(dpooled: &Tensor2, rows: usize, into: &mut Tensor2) {
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        for (d, g) in into.row_mut(r).iter_mut().zip(dpooled.row(0)) {
            *d += g * inv;
        }
    }
}

impl IecParams {
    pub fn new(tape: &mut ParamTape, config: IecConfig, seed: u64) -> Self {
        let d = config.d_model;
        let lin = |tape: &mut ParamTape, name: &str| Linear::standard(tape, &format!("iec.{name}"), d, d, seed);
        let mediator = lin(tape, "mediator");
        let p = lin(tape, "p");
        let q = lin(tape, "q");
        let k_m = lin(tape, "k_m");
        let v_m = lin(tape, "v_m");
        let k_c = lin(tape, "k_c");
        let v_c = lin(tape, "v_c");
        let ffn = FeedForward {
            up: lin(tape, "ffn.up"),
            down: lin(tape, "ffn.down"),
            activation: config.activation,
        };
        Self {
            config,
            mediator,
            p,
            q,
            k_m,
            v_m,
            k_c,
            v_c,
            ffn,
        }
    }

    /// Projects the dictionary; fails when it has not been built yet.
    pub fn memory(&self, tape: &ParamTape, dict: Option<&GlobalDictionary>) -> Result<CrossMemory> {
        let dict = dict.ok_or_else(|| {
            IcmError::State("global dictionary missing; build it after scene tuning (rebuild_dictionary) before using the IEC block".into())
        })?;
        if dict.width() != self.config.d_model {
            return Err(IcmError::dim("cross_sampling", format!("d_model {}", self.config.d_model), format!("dictionary {}", dict.centroids.shape_str())));
        }
        Ok(CrossMemory {
            centroids: dict.centroids.clone(),
            keys: self.k_c.forward(tape, &dict.centroids)?,
            values: self.v_c.forward(tape, &dict.centroids)?,
        })
    }

    pub fn memory_grad(&self, mem: &CrossMemory) -> CrossMemoryGrad {
        CrossMemoryGrad {
            dk: Tensor2::zeros(mem.keys.rows(), mem.keys.cols()),
            dv: Tensor2::zeros(mem.values.rows(), mem.values.cols()),
        }
    }

    /// Pushes accumulated key/value gradients into the projection parameters.
    pub fn memory_backward(&self, grads: &mut Gradients, mem: &CrossMemory, g: &CrossMemoryGrad) -> Result<()> {
        self.k_c.backward_params(grads, &mem.centroids, &g.dk)?;
        self.v_c.backward_params(grads, &mem.centroids, &g.dv)?;
        Ok(())
    }

    fn check_tokens(&self, tokens: &Tensor2) -> Result<()> {
        if tokens.rows() == 0 || tokens.cols() != self.config.d_model {
            return Err(IcmError::dim("self_sampling", format!("n × {}", self.config.d_model), tokens.shape_str()));
        }
        Ok(())
    }

    /// Query from the pooled tokens, keys and values from the mediator tokens.
    pub fn self_sampling(&self, tape: &ParamTape, tokens: &Tensor2) -> Result<(Vec<f64>, SelfCache)> {
        self.check_tokens(tokens)?;
        let pooled = pool(tokens);
        let mediator = self.mediator.forward(tape, tokens)?;
        let query = self.p.forward(tape, &pooled)?;
        let keys = self.k_m.forward(tape, &mediator)?;
        let values = self.v_m.forward(tape, &mediator)?;
        let (out, attn) = attention_forward(&query, &keys, &values, self.config.attention_scaled)?;
        Ok((
            out.into_data(),
            SelfCache {
                tokens: tokens.clone(),
                pooled,
                mediator,
                query,
                keys,
                values,
                attn,
            },
        ))
    }

    /// Query from the pooled representation, keys and values from the dictionary.
    pub fn cross_sampling(&self, tape: &ParamTape, pooled: &[f64], mem: &CrossMemory) -> Result<(Vec<f64>, CrossCache)> {
        if pooled.len() != self.config.d_model {
            return Err(IcmError::dim("cross_sampling", self.config.d_model, pooled.len()));
        }
        let pooled = Tensor2::row_vector(pooled);
        let query = self.q.forward(tape, &pooled)?;
        let (out, attn) = attention_forward(&query, &mem.keys, &mem.values, self.config.attention_scaled)?;
        Ok((out.into_data(), CrossCache { pooled, query, attn }))
    }

    /// `FFN(y_m + y_x)`.
    pub fn forward(&self, tape: &ParamTape, tokens: &Tensor2, mem: &CrossMemory) -> Result<IecOutput> {
        let (y_m, self_side) = self.self_sampling(tape, tokens)?;
        let (y_x, cross) = self.cross_sampling(tape, self_side.pooled.row(0), mem)?;
        let sum: Vec<f64> = y_m.iter().zip(&y_x).map(|(a, b)| a + b).collect();
        let (y, ffn) = self.ffn.forward(tape, &Tensor2::row_vector(&sum))?;
        Ok(IecOutput {
            y_m,
            y_x,
            y: y.into_data(),
            cache: IecCache { self_side, cross, ffn },
        })
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input tokens. Dictionary key/value gradients go to `mem_grad`.
    pub fn backward(
        &self,
        tape: &ParamTape,
        grads: &mut Gradients,
        cache: &IecCache,
        mem: &CrossMemory,
        mem_grad: &mut CrossMemoryGrad,
        dy: &[f64],
    ) -> Result<Tensor2> {
        let dsum = self.ffn.backward(tape, grads, &cache.ffn, &Tensor2::row_vector(dy))?;
        let sc = &cache.self_side;
        let mut dtokens = Tensor2::zeros(sc.tokens.rows(), sc.tokens.cols());

        let cc = &cache.cross;
        let (dq, dk, dv) = attention_backward(&cc.query, &mem.keys, &mem.values, &cc.attn, &dsum)?;
        mem_grad.dk.add_assign(&dk);
        mem_grad.dv.add_assign(&dv);
        let mut dpooled = self.q.backward(tape, grads, &cc.pooled, &dq)?;

        let (dq, dk, dv) = attention_backward(&sc.query, &sc.keys, &sc.values, &sc.attn, &dsum)?;
        dpooled.add_assign(&self.p.backward(tape, grads, &sc.pooled, &dq)?);
        let mut dmed = self.k_m.backward(tape, grads, &sc.mediator, &dk)?;
        dmed.add_assign(&self.v_m.backward(tape, grads, &sc.mediator, &dv)?);
        dtokens.add_assign(&self.mediator.backward(tape, grads, &sc.tokens, &dmed)?);
        spread_pooled(&dpooled, sc.tokens.rows(), &mut dtokens);
        Ok(dtokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_tape;
    use rand_distr::{Distribution, Normal};

    fn square() -> Tensor2 {
        Tensor2::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap()
    }

    fn inertia_of(points: &Tensor2, assign: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..points.rows()).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mut mean = vec![0.0; points.cols()];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(points.row(i)) {
                    *m += v / members.len() as f64;
                }
            }
            total += members.iter().map(|&i| sq_dist(points.row(i), &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn square_matches_exhaustive_optimum() {
        let pts = square();
        let best = (0..16u32)
            .map(|mask| {
                let assign: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
                inertia_of(&pts, &assign, 2)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 1.0);
        for seed in 0..10 {
            let d = kmeans(&pts, 2, seed, 100, 1e-9).unwrap();
            assert!((d.provenance.inertia - best).abs() < 1e-12);
            let mut rows: Vec<Vec<f64>> = (0..2).map(|c| d.centroids.row(c).to_vec()).collect();
            rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(rows, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        }
    }

    #[test]
    fn k_equal_n_reproduces_points() {
        let pts = square();
        let d = kmeans(&pts, 4, 3, 50, 1e-9).unwrap();
        assert_eq!(d.provenance.inertia, 0.0);
        let mut got: Vec<Vec<f64>> = (0..4).map(|c| d.centroids.row(c).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = (0..4).map(|c| pts.row(c).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let noise = Normal::new(0.0, 0.1).unwrap();
            let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
            let rows: Vec<Vec<f64>> = (0..60)
                .map(|i| centers[i % 2].iter().map(|c| c + noise.sample(&mut rng)).collect())
                .collect();
            let d = kmeans(&Tensor2::from_rows(&rows).unwrap(), 2, seed, 100, 1e-9).unwrap();
            for c in centers {
                let (_, dist) = nearest(&c, &d.centroids);
                assert!(dist.sqrt() < 0.1, "seed {seed}: {}", dist.sqrt());
            }
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let pts = Tensor2::from_rows(&rows).unwrap();
        for seed in 0..5 {
            let d = kmeans(&pts, 8, seed, 200, 0.0).unwrap();
            let h = &d.provenance.inertia_history;
            assert!(h.len() > 1);
            for w in h.windows(2) {
                assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
            }
            assert!(d.provenance.inertia <= *h.last().unwrap());
        }
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let rows = vec![[1.0, 1.0]; 5].into_iter().chain([[4.0, 0.0]]).collect::<Vec<_>>();
        let d = kmeans(&Tensor2::from_rows(&rows).unwrap(), 3, 0, 20, 1e-12).unwrap();
        assert!(d.centroids.is_finite());
        assert_eq!(d.provenance.inertia, 0.0);
    }

    #[test]
    fn kmeans_is_deterministic_and_checks_counts() {
        let pts = square();
        assert_eq!(kmeans(&pts, 2, 5, 10, 1e-9).unwrap(), kmeans(&pts, 2, 5, 10, 1e-9).unwrap());
        assert!(matches!(kmeans(&pts, 5, 0, 10, 1e-9), Err(IcmError::Data(_))));
    }

    #[test]
    fn silhouette_separates_clean_groups() {
        let pts = square();
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.8);
        assert!(silhouette(&pts, &[0, 1, 0, 1]).unwrap() < 0.0);
    }

    fn params(tape: &mut ParamTape, d: usize, activation: Activation, seed: u64) -> IecParams {
        IecParams::new(
            tape,
            IecConfig {
                d_model: d,
                attention_scaled: true,
                activation,
            },
            seed,
        )
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dict(centroids: Tensor2) -> GlobalDictionary {
        GlobalDictionary {
            centroids,
            provenance: DictionaryProvenance {
                dataset_hash: None,
                seed: 0,
                points: 0,
                iterations: 0,
                inertia: 0.0,
                inertia_history: vec![],
            },
        }
    }

    #[test]
    fn identical_tokens_give_their_value_projection() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 1);
        let v = [0.5, -1.0, 2.0, 0.25];
        let tokens = Tensor2::from_rows(&[v; 4]).unwrap();
        let (y_m, _) = iec.self_sampling(&tape, &tokens).unwrap();
        let m = iec.mediator.forward(&tape, &Tensor2::row_vector(&v)).unwrap();
        let expect = iec.v_m.forward(&tape, &m).unwrap();
        for (a, b) in y_m.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_alignment_selects_one_token() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 3, Activation::Gelu, 2);
        // Identity mediator and key maps, query map scaled so the logits saturate.
        for (lin, s) in [(iec.mediator, 1.0), (iec.k_m, 1.0), (iec.p, 400.0)] {
            let w = tape.value_mut(lin.w);
            w.fill(0.0);
            for i in 0..3 {
                w.set(i, i, s);
            }
        }
        let tokens = Tensor2::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let (y_m, _) = iec.self_sampling(&tape, &tokens).unwrap();
        let expect = iec.v_m.forward(&tape, &Tensor2::row_vector(tokens.row(1))).unwrap();
        for (a, b) in y_m.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn single_centroid_ignores_query() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mem = iec.memory(&tape, Some(&dict(random(&mut rng, 1, 4)))).unwrap();
        let (a, _) = iec.cross_sampling(&tape, &[1.0, 2.0, 3.0, 4.0], &mem).unwrap();
        let (b, _) = iec.cross_sampling(&tape, &[-5.0, 0.0, 0.1, 9.0], &mem).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, mem.values.row(0));
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 4);
        tape.value_mut(iec.q.w).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mem = iec.memory(&tape, Some(&dict(random(&mut rng, 5, 4)))).unwrap();
        let (y, _) = iec.cross_sampling(&tape, &[1.0, 2.0, 3.0, 4.0], &mem).unwrap();
        let mean = mem.values.mean_rows();
        for (a, b) in y.iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_dictionary_is_a_state_error() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 5);
        match iec.memory(&tape, None) {
            Err(IcmError::State(msg)) => assert!(msg.contains("rebuild_dictionary")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_ffn_sums_both_samplings() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Identity, 6);
        for lin in [iec.ffn.up, iec.ffn.down] {
            let w = tape.value_mut(lin.w);
            w.fill(0.0);
            for i in 0..4 {
                w.set(i, i, 1.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mem = iec.memory(&tape, Some(&dict(random(&mut rng, 6, 4)))).unwrap();
        let out = iec.forward(&tape, &random(&mut rng, 4, 4), &mem).unwrap();
        for i in 0..4 {
            assert!((out.y[i] - (out.y_m[i] + out.y_x[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inputs_reduce_to_output_bias() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 7);
        tape.value_mut(iec.ffn.down.b).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, -0.4]);
        let mem = iec.memory(&tape, Some(&dict(Tensor2::zeros(3, 4)))).unwrap();
        let out = iec.forward(&tape, &Tensor2::zeros(4, 4), &mem).unwrap();
        assert_eq!(out.y, vec![0.1, -0.2, 0.3, -0.4]);
    }

    #[test]
    fn outputs_stay_in_value_hull() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 3, Activation::Gelu, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mem = iec.memory(&tape, Some(&dict(random(&mut rng, 5, 3)))).unwrap();
        let out = iec.forward(&tape, &random(&mut rng, 4, 3), &mem).unwrap();
        let within = |y: &[f64], vals: &Tensor2| {
            (0..vals.cols()).all(|c| {
                let col: Vec<f64> = (0..vals.rows()).map(|r| vals.get(r, c)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                y[c] >= lo - 1e-12 && y[c] <= hi + 1e-12
            })
        };
        assert!(within(&out.y_m, &out.cache.self_side.values));
        assert!(within(&out.y_x, &mem.values));
    }

    #[test]
    fn full_block_gradients_match_finite_differences() {
        let mut tape = ParamTape::new();
        let iec = params(&mut tape, 4, Activation::Gelu, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = dict(random(&mut rng, 5, 4));
        let tokens = random(&mut rng, 4, 4);
        let coeff: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |t: &ParamTape, tokens: &Tensor2| -> Result<f64> {
            let mem = iec.memory(t, Some(&d))?;
            let out = iec.forward(t, tokens, &mem)?;
            Ok(out.y.iter().zip(&coeff).map(|(a, b)| a * b).sum())
        };
        let mem = iec.memory(&tape, Some(&d)).unwrap();
        let out = iec.forward(&tape, &tokens, &mem).unwrap();
        let mut grads = tape.zero_gradients();
        let mut mg = iec.memory_grad(&mem);
        let dtokens = iec.backward(&tape, &mut grads, &out.cache, &mem, &mut mg, &coeff).unwrap();
        iec.memory_backward(&mut grads, &mem, &mg).unwrap();
        let report = check_tape(&mut tape, |t| loss(t, &tokens), &grads, 1e-5, None, 0).unwrap();
        for g in &report {
            assert!(g.max_rel_error < 1e-4, "{} {}", g.name, g.max_rel_error);
        }
        let err = crate::numerics::finite_diff_check(
            |x| loss(&tape, &Tensor2::from_vec(4, 4, x.to_vec())?),
            tokens.data(),
            dtokens.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "tokens {err}");
    }

    #[test]
    fn dictionary_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d = kmeans(&Tensor2::from_rows(&rows).unwrap(), 4, 1, 50, 1e-9).unwrap();
        let text = serde_json::to_string(&d).unwrap();
        let back: GlobalDictionary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
    }
}
