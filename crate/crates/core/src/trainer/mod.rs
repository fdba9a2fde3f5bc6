//! Model assembly, the two training stages, prediction decoding and
//! checkpoints.
//!
//! Per segment the model computes
//!
//! ```text
//! h_j    = expert_j(x_j)                      j ∈ {facial, action, object, background}
//! P      = softmax(W · mean_j h_j)
//! y_moe  = LN(Σ_j P_j h_j)
//! y_iec  = FFN(self_sampling(h) + cross_sampling(mean_j h_j, dictionary))
//! z      = LN(y_moe + y_iec)
//! logits = head(z)
//! ```
//!
//! with non-affine `LN`. A linear task head stands in for a language model;
//! its class and cause cross-entropies replace the language-modeling loss.

mod checkpoint;
mod decode;
mod gradsuite;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::experts::{Expert, ExpertConfig, ExpertOutput};
use crate::iec::{CrossMemory, CrossMemoryGrad, GlobalDictionary, IecConfig, IecOutput, IecParams, DEFAULT_DICTIONARY_SIZE};
use crate::layers::{Activation, Linear, Norm, PlainNorm, LN_EPS};
use crate::numerics::{cross_entropy, layer_norm, layer_norm_backward, Gradients, LayerNormCache, ParamTape, Tensor2};
use crate::sbm::{combine, combine_backward, gate, gate_backward, router_balance_loss, BalanceLossConfig, CombineCache, Gate, Router, NUM_EXPERTS};
use crate::synthgen::{Channel, Mode, SceneFeatureBundle, Segment};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decode::{decode_triples, predict_triples, Attribution, PredictionTriple};
pub use gradsuite::{gradcheck_suite, ConfigurationCheck, GradcheckConfig, GradcheckReport};
pub use train::{
    build_dictionary, embed_segments, evaluate, finish_training, scene_objective, scene_tuned_model, stage1_scene_tuning, stage2_omni_tuning, train_model, EpochSummary, EvalSummary,
    StepLog, TrainOutcome, TrainingData,
};

/// Architecture hyperparameters that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-expert internal widths; defaults to the channel input widths.
    pub internal_widths: Option<[usize; 4]>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub positional_encoding: bool,
    pub attention_scaled: bool,
    pub affine_moe_norm: bool,
    pub iec_activation: Activation,
    pub dictionary_size: usize,
    /// Let gradients reach the experts through the router input. Off by
    /// default: the router input is detached, so routing and the balance loss
    /// only train the router weights.
    pub gate_input_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            internal_widths: None,
            d_model: 64,
            layers: 8,
            heads: 2,
            ffn_mult: 2,
            positional_encoding: false,
            attention_scaled: true,
            affine_moe_norm: false,
            iec_activation: Activation::Gelu,
            dictionary_size: DEFAULT_DICTIONARY_SIZE,
            gate_input_gradient: false,
        }
    }
}

/// Dataset-dependent sizes: the class set and the channel input widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub mode: Mode,
    pub input_widths: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoSbm,
    NoIec,
    NoSceneTuning,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoIec, Ablation::NoSbm, Ablation::NoSceneTuning];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSbm => "no_sbm",
            Ablation::NoIec => "no_iec",
            Ablation::NoSceneTuning => "no_scene_tuning",
        }
    }

    pub fn switches(self) -> Switches {
        let mut s = Switches::FULL;
        match self {
            Ablation::Full => {}
            Ablation::NoSbm => s.sbm = false,
            Ablation::NoIec => s.iec = false,
            Ablation::NoSceneTuning => s.scene_tuning = false,
        }
        s
    }
}

impl std::str::FromStr for Ablation {
    type Err = IcmError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| IcmError::Config(format!("unknown ablation {s:?}; expected full, no_sbm, no_iec or no_scene_tuning")))
    }
}

/// Component toggles; ablations flip one each, tests may combine them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    pub sbm: bool,
    pub iec: bool,
    pub scene_tuning: bool,
}

impl Switches {
    pub const FULL: Switches = Switches {
        sbm: true,
        iec: true,
        scene_tuning: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

/// Base learning rate of the large-model recipe.
pub const BASE_LR: f64 = 2e-5;
/// Multiplier applied to [`BASE_LR`] for small from-scratch networks.
pub const DESK_LR_MULTIPLIER: f64 = 50.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: BASE_LR * DESK_LR_MULTIPLIER,
            warmup_ratio: 0.03,
            epochs: 3,
            stage1_epochs: 3,
            batch_size: 8,
            alpha: 1e-4,
            beta: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            ablation: Ablation::Full,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(IcmError::Config(format!(
                "lr ({}) and batch_size ({}) must be positive",
                self.lr, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(IcmError::Config(format!("warmup_ratio {} outside [0,1]", self.warmup_ratio)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(IcmError::Config("alpha, beta and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFlags {
    pub scene_tuned: bool,
    pub scene_tuning_skipped: bool,
    pub omni_tuned: bool,
}

/// Parameter handles for the whole model; values live on a [`ParamTape`].
#[derive(Debug, Clone)]
pub struct Network {
    pub shape: ModelShape,
    pub config: ModelConfig,
    experts: Vec<Expert>,
    router: Router,
    moe_norm: PlainNorm,
    iec: IecParams,
    head_class: Linear,
    head_cause: Linear,
}

/// Intermediate values of one segment's forward pass.
#[derive(Debug, Clone)]
pub struct SegmentPass {
    pub expert_outputs: Vec<ExpertOutput>,
    gate: Option<Gate>,
    pub p: Vec<f64>,
    pub y_moe: Vec<f64>,
    combine: CombineCache,
    pub iec: Option<IecOutput>,
    fuse: LayerNormCache,
    pub z: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub cause_logits: Vec<f64>,
}

/// Loss components and routing statistics for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub l_class: f64,
    pub l_cause: f64,
    pub l_task: f64,
    pub l_rb: f64,
    pub entropy: f64,
    pub gate_means: [f64; 4],
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    pub fn total(&self) -> f64 {
        self.l_task + self.l_rb
    }
}

fn gate_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Network {
    pub fn new(tape: &mut ParamTape, shape: ModelShape, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.dictionary_size < 2 {
            return Err(IcmError::Config(format!("dictionary_size must be >= 2, got {}", config.dictionary_size)));
        }
        let internal = config.internal_widths.unwrap_or(shape.input_widths);
        let experts = Channel::ALL
            .iter()
            .map(|&ch| {
                let cfg = ExpertConfig {
                    input_width: shape.input_widths[ch.index()],
                    internal_width: internal[ch.index()],
                    layers: config.layers,
                    heads: config.heads,
                    d_model: config.d_model,
                    ffn_mult: config.ffn_mult,
                    positional_encoding: config.positional_encoding,
                    attention_scaled: config.attention_scaled,
                };
                Expert::new(tape, ch, cfg, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let router = Router::new(tape, NUM_EXPERTS, config.d_model, seed);
        let moe_norm = PlainNorm {
            affine: config.affine_moe_norm.then(|| Norm::new(tape, "moe.ln", config.d_model, seed)),
        };
        let iec = IecParams::new(
            tape,
            IecConfig {
                d_model: config.d_model,
                attention_scaled: config.attention_scaled,
                activation: config.iec_activation,
            },
            seed,
        );
        let head_class = Linear::standard(tape, "head.class", config.d_model, shape.mode.num_classes(), seed);
        let head_cause = Linear::standard(tape, "head.cause", config.d_model, NUM_EXPERTS, seed);
        Ok(Self {
            shape,
            config,
            experts,
            router,
            moe_norm,
            iec,
            head_class,
            head_cause,
        })
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn iec(&self) -> &IecParams {
        &self.iec
    }

    /// Normalized expert sizes for the balance loss.
    pub fn balance_config(&self, alpha: f64, beta: f64) -> Result<BalanceLossConfig> {
        let widths: Vec<usize> = self.experts.iter().map(|e| e.config.internal_width).collect();
        BalanceLossConfig::from_widths(alpha, beta, &widths)
    }

    pub fn check_bundle(&self, x: &SceneFeatureBundle) -> Result<()> {
        for (ch, m) in Channel::ALL.iter().zip(x.channels()) {
            if m.cols() != self.shape.input_widths[ch.index()] {
                return Err(IcmError::dim(
                    "forward_full",
                    format!("{} width {}", ch.name(), self.shape.input_widths[ch.index()]),
                    m.shape_str(),
                ));
            }
        }
        Ok(())
    }

    /// Cross-sampling memory for the current parameters, or `None` when the
    /// IEC block is switched off.
    pub fn memory(&self, tape: &ParamTape, dict: Option<&GlobalDictionary>, sw: Switches) -> Result<Option<CrossMemory>> {
        if sw.iec {
            self.iec.memory(tape, dict).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn forward_segment(&self, tape: &ParamTape, x: &SceneFeatureBundle, mem: Option<&CrossMemory>, sw: Switches) -> Result<SegmentPass> {
        self.check_bundle(x)?;
        let expert_outputs = self
            .experts
            .iter()
            .zip(x.channels())
            .map(|(e, m)| e.forward(tape, m))
            .collect::<Result<Vec<_>>>()?;
        let hs: Vec<&[f64]> = expert_outputs.iter().map(|o| o.h.data()).collect();
        let (gate_out, p) = if sw.sbm {
            let g = gate(tape, &self.router, &hs)?;
            let p = g.p.clone();
            (Some(g), p)
        } else {
            (None, vec![1.0 / NUM_EXPERTS as f64; NUM_EXPERTS])
        };
        let (y_moe, combine_cache) = combine(tape, &self.moe_norm, &hs, &p)?;
        let mut fused = y_moe.clone();
        let iec = if sw.iec {
            let mem = mem.ok_or_else(|| {
                IcmError::State("IEC block enabled but no dictionary memory supplied; build the dictionary after scene tuning".into())
            })?;
            let tokens = Tensor2::from_rows(&hs)?;
            let out = self.iec.forward(tape, &tokens, mem)?;
            for (f, y) in fused.iter_mut().zip(&out.y) {
                *f += y;
            }
            Some(out)
        } else {
            None
        };
        let (z, fuse) = layer_norm(&Tensor2::row_vector(&fused), None, None, LN_EPS)?;
        let class_logits = self.head_class.forward(tape, &z)?.into_data();
        let cause_logits = self.head_cause.forward(tape, &z)?.into_data();
        Ok(SegmentPass {
            expert_outputs,
            gate: gate_out,
            p,
            y_moe,
            combine: combine_cache,
            iec,
            fuse,
            z: z.into_data(),
            class_logits,
            cause_logits,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_segment(
        &self,
        tape: &ParamTape,
        grads: &mut Gradients,
        pass: &SegmentPass,
        dclass: &[f64],
        dcause: &[f64],
        dp_balance: Option<&[f64]>,
        mem: Option<(&CrossMemory, &mut CrossMemoryGrad)>,
    ) -> Result<()> {
        let z = Tensor2::row_vector(&pass.z);
        let mut dz = self.head_class.backward(tape, grads, &z, &Tensor2::row_vector(dclass))?;
        dz.add_assign(&self.head_cause.backward(tape, grads, &z, &Tensor2::row_vector(dcause))?);
        let dfused = layer_norm_backward(&pass.fuse, None, &dz, None, None).into_data();

        let hs: Vec<&[f64]> = pass.expert_outputs.iter().map(|o| o.h.data()).collect();
        let (mut dh, mut dp) = combine_backward(tape, grads, &self.moe_norm, &pass.combine, &hs, &pass.p, &dfused);
        if let Some(g) = &pass.gate {
            if let Some(extra) = dp_balance {
                for (a, b) in dp.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            let dgate = gate_backward(tape, &self.router, grads, g, &dp);
            if self.config.gate_input_gradient {
                let share = 1.0 / dh.len() as f64;
                for d in dh.iter_mut() {
                    crate::numerics::axpy(d, share, &dgate);
                }
            }
        }
        if let (Some(out), Some((mem, mg))) = (&pass.iec, mem) {
            let dtokens = self.iec.backward(tape, grads, &out.cache, mem, mg, &dfused)?;
            for (j, d) in dh.iter_mut().enumerate() {
                for (a, b) in d.iter_mut().zip(dtokens.row(j)) {
                    *a += b;
                }
            }
        }
        for ((e, out), d) in self.experts.iter().zip(&pass.expert_outputs).zip(&dh) {
            e.backward(tape, grads, &out.cache, &Tensor2::row_vector(d))?;
        }
        Ok(())
    }

    /// Stage-2 objective `L_task + L_rb` over a batch. With `grads`, the
    /// gradient of the total is accumulated into it.
    pub fn batch_objective(
        &self,
        tape: &ParamTape,
        batch: &[&Segment],
        dict: Option<&GlobalDictionary>,
        sw: Switches,
        balance: &BalanceLossConfig,
        grads: Option<&mut Gradients>,
    ) -> Result<BatchStats> {
        if batch.is_empty() {
            return Err(IcmError::Data("empty training batch".into()));
        }
        let mem = self.memory(tape, dict, sw)?;
        let passes = batch
            .iter()
            .map(|s| self.forward_segment(tape, &s.features, mem.as_ref(), sw))
            .collect::<Result<Vec<_>>>()?;
        let b = batch.len();
        let classes = self.shape.mode.num_classes();
        let normal = self.shape.mode.normal_class();

        let class_logits = Tensor2::from_rows(&passes.iter().map(|p| p.class_logits.as_slice()).collect::<Vec<_>>())?;
        let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
        let (l_class, dclass) = cross_entropy(&class_logits, &labels)?;

        let caused: Vec<usize> = (0..b).filter(|&i| batch[i].class != normal && batch[i].cause_channel.is_some()).collect();
        let mut dcause = Tensor2::zeros(b, NUM_EXPERTS);
        let l_cause = if caused.is_empty() {
            0.0
        } else {
            let logits = Tensor2::from_rows(&caused.iter().map(|&i| passes[i].cause_logits.as_slice()).collect::<Vec<_>>())?;
            let targets: Vec<usize> = caused
                .iter()
                .map(|&i| batch[i].cause_channel.map(|c| c.index()).unwrap_or(0))
                .collect();
            let (l, g) = cross_entropy(&logits, &targets)?;
            for (r, &i) in caused.iter().enumerate() {
                dcause.row_mut(i).copy_from_slice(g.row(r));
            }
            l
        };

        let p_rows: Vec<Vec<f64>> = passes.iter().map(|p| p.p.clone()).collect();
        let rb = if sw.sbm { Some(router_balance_loss(&p_rows, balance)?) } else { None };
        let l_rb = rb.as_ref().map_or(0.0, |r| r.total());

        let mut gate_means = [0.0; 4];
        let mut entropy = 0.0;
        let mut correct = 0;
        for (i, p) in passes.iter().enumerate() {
            for (g, v) in gate_means.iter_mut().zip(&p.p) {
                *g += v / b as f64;
            }
            entropy += gate_entropy(&p.p) / b as f64;
            if argmax(&p.class_logits) == labels[i] {
                correct += 1;
            }
        }
        debug_assert_eq!(class_logits.cols(), classes);

        if let Some(grads) = grads {
            let mut mem_grad = mem.as_ref().map(|m| self.iec.memory_grad(m));
            for (i, pass) in passes.iter().enumerate() {
                let dp = rb.as_ref().map(|r| r.dp[i].as_slice());
                let m = mem.as_ref().zip(mem_grad.as_mut());
                self.backward_segment(tape, grads, pass, dclass.row(i), dcause.row(i), dp, m)?;
            }
            if let (Some(m), Some(mg)) = (&mem, &mem_grad) {
                self.iec.memory_backward(grads, m, mg)?;
            }
        }
        Ok(BatchStats {
            l_class,
            l_cause,
            l_task: l_class + l_cause,
            l_rb,
            entropy,
            gate_means,
            correct,
            count: b,
        })
    }
}

/// Parameters, structure, dictionary and training status of a model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub network: Network,
    pub tape: ParamTape,
    pub dictionary: Option<GlobalDictionary>,
    pub switches: Switches,
    pub stages: StageFlags,
    pub seed: u64,
}

impl ModelState {
    pub fn new(shape: ModelShape, config: ModelConfig, switches: Switches, seed: u64) -> Result<Self> {
        let mut tape = ParamTape::new();
        let network = Network::new(&mut tape, shape, config, seed)?;
        Ok(Self {
            network,
            tape,
            dictionary: None,
            switches,
            stages: StageFlags::default(),
            seed,
        })
    }

    pub fn memory(&self) -> Result<Option<CrossMemory>> {
        self.network.memory(&self.tape, self.dictionary.as_ref(), self.switches)
    }

    /// Class logits, cause logits and gating distribution for one segment.
    pub fn forward_full(&self, x: &SceneFeatureBundle) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mem = self.memory()?;
        let pass = self.network.forward_segment(&self.tape, x, mem.as_ref(), self.switches)?;
        Ok((pass.class_logits, pass.cause_logits, pass.p))
    }
}

#[cfg(test)]
mod tests;
