//! Scene experts: per-channel stacks of pre-norm transformer blocks that map
//! `F × d_j` frame features to one pooled `d_model` vector per segment.

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::layers::{Activation, FeedForward, FeedForwardCache, Linear, Norm};
use crate::numerics::{attention_backward, attention_forward, mse, AttentionCache, Gradients, LayerNormCache, ParamTape, Tensor2};
use crate::synthgen::Channel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub input_width: usize,
    pub internal_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Feed-forward hidden width as a multiple of `internal_width`.
    pub ffn_mult: usize,
    pub positional_encoding: bool,
    pub attention_scaled: bool,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.internal_width % self.heads != 0 {
            return Err(IcmError::Config(format!(
                "expert needs layers >= 1 and internal_width ({}) divisible by heads ({})",
                self.internal_width, self.heads
            )));
        }
        if self.input_width == 0 || self.d_model == 0 || self.ffn_mult == 0 {
            return Err(IcmError::Config("expert widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    a: Tensor2,
    q: Tensor2,
    heads: Vec<(Tensor2, Tensor2, Tensor2, AttentionCache)>,
    concat: Tensor2,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
}

/// One scene expert plus its stage-1 scene decoder.
#[derive(Debug, Clone)]
pub struct Expert {
    pub channel: Channel,
    pub config: ExpertConfig,
    input: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
    output: Linear,
    decoder: Linear,
}

#[derive(Debug, Clone)]
pub struct ExpertCache {
    blocks: Vec<(Tensor2, BlockCache)>,
    input: Tensor2,
    final_in: Tensor2,
    final_ln: LayerNormCache,
    pooled: Tensor2,
}

/// Pooled output plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    pub h: Tensor2,
    /// Final normalized frame states.
    pub tokens: Tensor2,
    pub cache: ExpertCache,
}

fn sinusoid(frames: usize, width: usize) -> Tensor2 {
    let mut pe = Tensor2::zeros(frames, width);
    for f in 0..frames {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = f as f64 / rate;
            pe.set(f, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    pe
}

impl Expert {
    pub fn new(tape: &mut ParamTape, channel: Channel, config: ExpertConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = format!("expert.{}", channel.name());
        let w = config.internal_width;
        let hidden = w * config.ffn_mult;
        let resid_std = 1.0 / (w as f64).sqrt() / ((2 * config.layers) as f64).sqrt();
        let input = Linear::standard(tape, &format!("{p}.in"), config.input_width, w, seed);
        let blocks = (0..config.layers)
            .map(|l| {
                let b = format!("{p}.block{l}");
                Block {
                    ln1: Norm::new(tape, &format!("{b}.ln1"), w, seed),
                    q: Linear::standard(tape, &format!("{b}.attn.q"), w, w, seed),
                    k: Linear::standard(tape, &format!("{b}.attn.k"), w, w, seed),
                    v: Linear::standard(tape, &format!("{b}.attn.v"), w, w, seed),
                    o: Linear::new(tape, &format!("{b}.attn.o"), w, w, resid_std, seed),
                    ln2: Norm::new(tape, &format!("{b}.ln2"), w, seed),
                    ffn: FeedForward {
                        up: Linear::standard(tape, &format!("{b}.ffn.up"), w, hidden, seed),
                        down: Linear::new(tape, &format!("{b}.ffn.down"), hidden, w, resid_std * (w as f64 / hidden as f64).sqrt(), seed),
                        activation: Activation::Gelu,
                    },
                }
            })
            .collect();
        let final_norm = Norm::new(tape, &format!("{p}.ln_f"), w, seed);
        let output = Linear::standard(tape, &format!("{p}.out"), w, config.d_model, seed);
        let decoder = Linear::standard(tape, &format!("decoder.{}", channel.name()), config.d_model, config.input_width, seed);
        Ok(Self {
            channel,
            config,
            input,
            blocks,
            final_norm,
            output,
            decoder,
        })
    }

    /// Number of scalar parameters of the expert body (decoder excluded).
    pub fn num_parameters(&self, tape: &ParamTape) -> usize {
        let prefix = format!("expert.{}.", self.channel.name());
        tape.ids()
            .filter(|id| tape.name(*id).starts_with(&prefix))
            .map(|id| tape.value(id).data().len())
            .sum()
    }

    pub fn forward(&self, tape: &ParamTape, x: &Tensor2) -> Result<ExpertOutput> {
        if x.cols() != self.config.input_width {
            return Err(IcmError::dim(
                "expert_forward",
                format!("{} expert input width {}", self.channel.name(), self.config.input_width),
                format!("x {}", x.shape_str()),
            ));
        }
        let mut e = self.input.forward(tape, x)?;
        if self.config.positional_encoding {
            e.add_assign(&sinusoid(x.rows(), self.config.internal_width));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = self.block_forward(tape, block, &e)?;
            caches.push((e, cache));
            e = next;
        }
        let (tokens, final_ln) = self.final_norm.forward(tape, &e)?;
        let pooled = tokens.mean_rows();
        let h = self.output.forward(tape, &pooled)?;
        Ok(ExpertOutput {
            h,
            tokens,
            cache: ExpertCache {
                blocks: caches,
                input: x.clone(),
                final_in: e,
                final_ln,
                pooled,
            },
        })
    }

    fn block_forward(&self, tape: &ParamTape, blk: &Block, e: &Tensor2) -> Result<(Tensor2, BlockCache)> {
        let heads = self.config.heads;
        let dh = self.config.internal_width / heads;
        let (a, ln1) = blk.ln1.forward(tape, e)?;
        let q = blk.q.forward(tape, &a)?;
        let k = blk.k.forward(tape, &a)?;
        let v = blk.v.forward(tape, &a)?;
        let mut concat = Tensor2::zeros(e.rows(), self.config.internal_width);
        let mut head_caches = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (q.col_slice(h * dh, dh), k.col_slice(h * dh, dh), v.col_slice(h * dh, dh));
            let (oh, cache) = attention_forward(&qh, &kh, &vh, self.config.attention_scaled)?;
            concat.set_col_slice(h * dh, &oh);
            head_caches.push((qh, kh, vh, cache));
        }
        let mut e1 = blk.o.forward(tape, &concat)?;
        e1.add_assign(e);
        let (b, ln2) = blk.ln2.forward(tape, &e1)?;
        let (f, ffn) = blk.ffn.forward(tape, &b)?;
        let mut e2 = f;
        e2.add_assign(&e1);
        Ok((
            e2,
            BlockCache {
                ln1,
                a,
                q,
                heads: head_caches,
                concat,
                ln2,
                ffn,
            },
        ))
    }

    fn block_backward(
        &self,
        tape: &ParamTape,
        grads: &mut Gradients,
        blk: &Block,
        c: &BlockCache,
        de2: &Tensor2,
    ) -> Result<Tensor2> {
        let dh = self.config.internal_width / self.config.heads;
        let db = blk.ffn.backward(tape, grads, &c.ffn, de2)?;
        let mut de1 = blk.ln2.backward(tape, grads, &c.ln2, &db);
        de1.add_assign(de2);
        let dconcat = blk.o.backward(tape, grads, &c.concat, &de1)?;
        let rows = c.q.rows();
        let (mut dq, mut dk, mut dv) = (
            Tensor2::zeros(rows, self.config.internal_width),
            Tensor2::zeros(rows, self.config.internal_width),
            Tensor2::zeros(rows, self.config.internal_width),
        );
        for (h, (qh, kh, vh, cache)) in c.heads.iter().enumerate() {
            let doh = dconcat.col_slice(h * dh, dh);
            let (dqh, dkh, dvh) = attention_backward(qh, kh, vh, cache, &doh)?;
            dq.set_col_slice(h * dh, &dqh);
            dk.set_col_slice(h * dh, &dkh);
            dv.set_col_slice(h * dh, &dvh);
        }
        let mut da = blk.q.backward(tape, grads, &c.a, &dq)?;
        da.add_assign(&blk.k.backward(tape, grads, &c.a, &dk)?);
        da.add_assign(&blk.v.backward(tape, grads, &c.a, &dv)?);
        let mut de = blk.ln1.backward(tape, grads, &c.ln1, &da);
        de.add_assign(&de1);
        Ok(de)
    }

    /// Accumulates parameter gradients for upstream gradient `dh` (`1 × d_model`).
    pub fn backward(&self, tape: &ParamTape, grads: &mut Gradients, cache: &ExpertCache, dh: &Tensor2) -> Result<()> {
        let dpooled = self.output.backward(tape, grads, &cache.pooled, dh)?;
        let frames = cache.final_in.rows();
        let mut dtokens = Tensor2::zeros(frames, self.config.internal_width);
        for f in 0..frames {
            for (d, g) in dtokens.row_mut(f).iter_mut().zip(dpooled.row(0)) {
                *d = g / frames as f64;
            }
        }
        let mut de = self.final_norm.backward(tape, grads, &cache.final_ln, &dtokens);
        for (blk, (_, c)) in self.blocks.iter().zip(&cache.blocks).rev() {
            de = self.block_backward(tape, grads, blk, c, &de)?;
        }
        self.input.backward_params(grads, &cache.input, &de)
    }

    /// Linear head predicting the channel's generative target from `h`.
    pub fn scene_decoder(&self, tape: &ParamTape, h: &Tensor2) -> Result<Tensor2> {
        self.decoder.forward(tape, h)
    }

    /// Stage-1 loss for one segment: MSE between the decoded `h` and the
    /// channel target. Returns the loss and accumulates gradients through the
    /// decoder and the expert.
    pub fn scene_loss(
        &self,
        tape: &ParamTape,
        grads: Option<&mut Gradients>,
        x: &Tensor2,
        target: &Tensor2,
        weight: f64,
    ) -> Result<f64> {
        let out = self.forward(tape, x)?;
        let pred = self.scene_decoder(tape, &out.h)?;
        let (loss, mut dpred) = mse(&pred, target)?;
        if let Some(grads) = grads {
            dpred.scale(weight);
            let dh = self.decoder.backward(tape, grads, &out.h, &dpred)?;
            self.backward(tape, grads, &out.cache, &dh)?;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, pe: bool) -> ExpertConfig {
        ExpertConfig {
            input_width: 5,
            internal_width: 6,
            layers,
            heads: 2,
            d_model: 4,
            ffn_mult: 2,
            positional_encoding: pe,
            attention_scaled: true,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_config_and_width() {
        let mut tape = ParamTape::new();
        let bad = ExpertConfig { heads: 4, ..cfg(1, false) };
        assert!(matches!(Expert::new(&mut tape, Channel::Facial, bad, 0), Err(IcmError::Config(_))));
        let e = Expert::new(&mut tape, Channel::Facial, cfg(1, false), 0).unwrap();
        assert!(matches!(e.forward(&tape, &Tensor2::zeros(3, 4)), Err(IcmError::Dimension { .. })));
    }

    #[test]
    fn single_frame_has_no_cross_frame_mixing() {
        let mut tape = ParamTape::new();
        let e = Expert::new(&mut tape, Channel::Action, cfg(2, false), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 5);
        let together = e.forward(&tape, &x).unwrap();
        // Three identical frames attend uniformly to copies of themselves, so
        // the pooled result must match the lone frame.
        let row0 = Tensor2::row_vector(x.row(0));
        let alone = e.forward(&tape, &row0).unwrap();
        let dup = Tensor2::from_rows(&[x.row(0), x.row(0), x.row(0)]).unwrap();
        let tripled = e.forward(&tape, &dup).unwrap();
        for (a, b) in alone.h.data().iter().zip(tripled.h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(together.h.shape(), (1, 4));
    }

    #[test]
    fn frame_permutation_leaves_pooled_output_unchanged() {
        let mut tape = ParamTape::new();
        let e = Expert::new(&mut tape, Channel::Object, cfg(2, false), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 5);
        let perm = Tensor2::from_rows(&[x.row(2), x.row(0), x.row(3), x.row(1)]).unwrap();
        let a = e.forward(&tape, &x).unwrap().h;
        let b = e.forward(&tape, &perm).unwrap().h;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let mut tape = ParamTape::new();
        let e = Expert::new(&mut tape, Channel::Object, cfg(1, true), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 5);
        let perm = Tensor2::from_rows(&[x.row(2), x.row(0), x.row(3), x.row(1)]).unwrap();
        assert_ne!(e.forward(&tape, &x).unwrap().h, e.forward(&tape, &perm).unwrap().h);
    }

    #[test]
    fn two_layer_expert_gradients_match_finite_differences() {
        let mut tape = ParamTape::new();
        let e = Expert::new(&mut tape, Channel::Background, cfg(2, true), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 3, 5);
        let target = random(&mut rng, 1, 5);
        let mut grads = tape.zero_gradients();
        e.scene_loss(&tape, Some(&mut grads), &x, &target, 1.0).unwrap();
        let report = check_tape(&mut tape, |t| e.scene_loss(t, None, &x, &target, 1.0), &grads, 1e-5, None, 0).unwrap();
        for g in &report {
            assert!(g.max_rel_error < 1e-4, "{} {}", g.name, g.max_rel_error);
        }
        assert!(report.iter().any(|g| g.name == "decoder.background.w"));
    }

    #[test]
    fn zero_decoder_predicts_zero() {
        let mut tape = ParamTape::new();
        let e = Expert::new(&mut tape, Channel::Facial, cfg(1, false), 7).unwrap();
        let id = tape.id("decoder.facial.w").unwrap();
        tape.value_mut(id).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 2, 5);
        let target = random(&mut rng, 1, 5);
        let loss = e.scene_loss(&tape, None, &x, &target, 1.0).unwrap();
        let ms = target.data().iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!((loss - ms).abs() < 1e-15);
    }

    #[test]
    fn parameter_count_tracks_internal_width() {
        let mut tape = ParamTape::new();
        let small = Expert::new(&mut tape, Channel::Facial, cfg(1, false), 0).unwrap();
        let big = Expert::new(&mut tape, Channel::Action, ExpertConfig { internal_width: 12, ..cfg(1, false) }, 0).unwrap();
        let (w, d, i, f) = (6usize, 4usize, 5usize, 2usize);
        let expect = |w: usize| i * w + w + 2 * w + 4 * (w * w + w) + 2 * w + (w * f * w + w * f) + (w * f * w + w) + 2 * w + w * d + d;
        assert_eq!(small.num_parameters(&tape), expect(w));
        assert_eq!(big.num_parameters(&tape), expect(12));
    }
}
