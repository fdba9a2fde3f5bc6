use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, gate_entropy, ModelConfig, ModelShape, ModelState, Network, TrainConfig};
use crate::error::{IcmError, Result};
use crate::iec::{kmeans, GlobalDictionary};
use crate::numerics::tape::stream_seed;
use crate::numerics::{adamw_step, AdamW, Gradients, ParamTape, Tensor2};
use crate::synthgen::{Channel, Dataset, Mode, Prototypes, Segment, VideoSample};

/// What the trainer needs from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub mode: Mode,
    pub input_widths: [usize; 4],
    pub prototypes: &'a Prototypes,
    pub cause_boost: f64,
    pub train: &'a [VideoSample],
    pub dataset_hash: Option<&'a str>,
}

impl<'a> TrainingData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        let cfg = ds.config();
        Self {
            mode: cfg.mode,
            input_widths: cfg.channel_widths.as_array(),
            prototypes: &ds.prototypes,
            cause_boost: cfg.cause_boost,
            train: &ds.train,
            dataset_hash: Some(&ds.hash),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            mode: self.mode,
            input_widths: self.input_widths,
        }
    }

    fn segments(&self) -> Vec<&'a Segment> {
        self.train.iter().flat_map(|v| v.segments.iter()).collect()
    }

    fn check(&self, model: &ModelState) -> Result<()> {
        if model.network.shape != self.shape() {
            return Err(IcmError::Config(format!(
                "model built for {:?} with widths {:?}, dataset is {:?} with widths {:?}",
                model.network.shape.mode,
                model.network.shape.input_widths,
                self.mode,
                self.input_widths
            )));
        }
        if self.train.iter().all(|v| v.segments.is_empty()) {
            return Err(IcmError::Data("training split has no segments".into()));
        }
        Ok(())
    }
}

/// One optimizer step. Stage 1 fills `l_scene`; stage 2 fills the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_scene: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_task: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_rb: Option<f64>,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate_means: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Running accuracy over the epoch's batches (stage 2 only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

fn batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn shuffled<'a>(segs: &[&'a Segment], rng: &mut ChaCha8Rng) -> Vec<&'a Segment> {
    let mut order = segs.to_vec();
    order.shuffle(rng);
    order
}

/// Batch-mean over segments of the per-channel reconstruction MSE, summed
/// over channels.
pub fn scene_objective(
    network: &Network,
    tape: &ParamTape,
    prototypes: &Prototypes,
    cause_boost: f64,
    batch: &[&Segment],
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for seg in batch {
        for (e, ch) in network.experts().iter().zip(Channel::ALL) {
            let target = Tensor2::row_vector(&prototypes.scene_target(seg, ch, cause_boost));
            loss += w * e.scene_loss(tape, grads.as_deref_mut(), seg.features.channel(ch), &target, w)?;
        }
    }
    Ok(loss)
}

/// Trains every expert and its scene decoder to reconstruct the channel's
/// noise-free target. Router, IEC and head are left untouched.
pub fn stage1_scene_tuning(model: &mut ModelState, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(model)?;
    let segs = data.segments();
    let per_epoch = batches(segs.len(), cfg.batch_size);
    let opt = AdamW::new(cfg.lr, cfg.warmup_ratio, cfg.weight_decay, (per_epoch * cfg.stage1_epochs) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "stage1.order"));
    let mut out = TrainOutcome::default();
    model.tape.reset_optimizer();
    for epoch in 0..cfg.stage1_epochs {
        let order = shuffled(&segs, &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.tape.zero_gradients();
            let loss = scene_objective(&model.network, &model.tape, data.prototypes, data.cause_boost, chunk, Some(&mut grads))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(IcmError::Numeric(format!(
                    "scene tuning diverged at step {} (epoch {epoch}): loss={loss}",
                    model.tape.step()
                )));
            }
            let step = model.tape.step();
            model.tape.set_gradients(grads)?;
            let lr = adamw_step(&mut model.tape, &opt, |n| n.starts_with("expert.") || n.starts_with("decoder."))?;
            sum += loss;
            out.steps.push(StepLog {
                stage: 1,
                epoch,
                step,
                lr,
                l_scene: Some(loss),
                l_task: None,
                l_rb: None,
                loss,
                entropy: None,
                gate_means: None,
            });
        }
        out.epochs.push(EpochSummary {
            stage: 1,
            epoch,
            mean_loss: sum / per_epoch as f64,
            train_accuracy: None,
        });
    }
    model.stages.scene_tuned = true;
    Ok(out)
}

/// Pooled scene representation (mean of the expert outputs) of every segment.
pub fn embed_segments(model: &ModelState, videos: &[VideoSample]) -> Result<Tensor2> {
    let mut rows = Vec::new();
    for seg in videos.iter().flat_map(|v| v.segments.iter()) {
        let mut pooled = vec![0.0; model.network.config.d_model];
        for (e, ch) in model.network.experts().iter().zip(Channel::ALL) {
            let h = e.forward(&model.tape, seg.features.channel(ch))?.h;
            for (p, v) in pooled.iter_mut().zip(h.data()) {
                *p += v;
            }
        }
        let n = model.network.experts().len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        rows.push(pooled);
    }
    if rows.is_empty() {
        return Err(IcmError::Data("cannot build a dictionary from an empty dataset".into()));
    }
    Tensor2::from_rows(&rows)
}

/// Embeds every training segment and clusters the embeddings into the
/// global dictionary, which is stored on the model.
pub fn build_dictionary(model: &mut ModelState, data: &TrainingData, cfg: &TrainConfig) -> Result<GlobalDictionary> {
    data.check(model)?;
    let points = embed_segments(model, data.train)?;
    let mut dict = kmeans(
        &points,
        model.network.config.dictionary_size,
        stream_seed(cfg.seed, "dictionary"),
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
    )?;
    dict.provenance.dataset_hash = data.dataset_hash.map(str::to_string);
    model.dictionary = Some(dict.clone());
    Ok(dict)
}

/// Minimizes `L_task + L_rb` over all parameters except the scene decoders.
pub fn stage2_omni_tuning(model: &mut ModelState, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(model)?;
    if model.switches.iec && model.dictionary.is_none() {
        return Err(IcmError::State("stage 2 with the IEC block needs a dictionary; run build_dictionary first".into()));
    }
    let balance = model.network.balance_config(cfg.alpha, cfg.beta)?;
    let segs = data.segments();
    let per_epoch = batches(segs.len(), cfg.batch_size);
    let opt = AdamW::new(cfg.lr, cfg.warmup_ratio, cfg.weight_decay, (per_epoch * cfg.epochs) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "stage2.order"));
    let mut out = TrainOutcome::default();
    model.tape.reset_optimizer();
    for epoch in 0..cfg.epochs {
        let order = shuffled(&segs, &mut rng);
        let (mut sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.tape.zero_gradients();
            let stats = model.network.batch_objective(
                &model.tape,
                chunk,
                model.dictionary.as_ref(),
                model.switches,
                &balance,
                Some(&mut grads),
            )?;
            let loss = stats.total();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(IcmError::Numeric(format!(
                    "omni tuning diverged at step {} (epoch {epoch}): l_task={} l_rb={}",
                    model.tape.step(),
                    stats.l_task,
                    stats.l_rb
                )));
            }
            let step = model.tape.step();
            model.tape.set_gradients(grads)?;
            let lr = adamw_step(&mut model.tape, &opt, |n| !n.starts_with("decoder."))?;
            sum += loss;
            correct += stats.correct;
            out.steps.push(StepLog {
                stage: 2,
                epoch,
                step,
                lr,
                l_scene: None,
                l_task: Some(stats.l_task),
                l_rb: Some(stats.l_rb),
                loss,
                entropy: Some(stats.entropy),
                gate_means: Some(stats.gate_means),
            });
        }
        out.epochs.push(EpochSummary {
            stage: 2,
            epoch,
            mean_loss: sum / per_epoch as f64,
            train_accuracy: Some(correct as f64 / segs.len() as f64),
        });
    }
    model.stages.omni_tuned = true;
    Ok(out)
}

/// Fresh model followed by scene tuning, or a fresh model marked as skipped
/// when the ablation turns stage 1 off.
pub fn scene_tuned_model(model_cfg: &ModelConfig, data: &TrainingData, cfg: &TrainConfig) -> Result<(ModelState, TrainOutcome)> {
    cfg.validate()?;
    let switches = cfg.ablation.switches();
    let mut model = ModelState::new(data.shape(), model_cfg.clone(), switches, cfg.seed)?;
    if !switches.scene_tuning {
        model.stages.scene_tuning_skipped = true;
        return Ok((model, TrainOutcome::default()));
    }
    let log = stage1_scene_tuning(&mut model, data, cfg)?;
    Ok((model, log))
}

/// Dictionary build (when the IEC block is on) and omni tuning. The model's
/// switches are reset to those of `cfg.ablation`, so a scene-tuned model can
/// be shared between ablations that all keep stage 1.
pub fn finish_training(mut model: ModelState, data: &TrainingData, cfg: &TrainConfig) -> Result<(ModelState, TrainOutcome)> {
    cfg.validate()?;
    model.switches = cfg.ablation.switches();
    if model.switches.scene_tuning != model.stages.scene_tuned {
        return Err(IcmError::State(format!(
            "ablation {} does not match the model's stage-1 status (scene_tuned = {})",
            cfg.ablation.name(),
            model.stages.scene_tuned
        )));
    }
    if model.switches.iec {
        build_dictionary(&mut model, data, cfg)?;
    }
    let log = stage2_omni_tuning(&mut model, data, cfg)?;
    Ok((model, log))
}

/// Full pipeline: scene tuning (unless ablated), dictionary build (when the
/// IEC block is on), then omni tuning.
pub fn train_model(model_cfg: &ModelConfig, data: &TrainingData, cfg: &TrainConfig) -> Result<(ModelState, TrainOutcome)> {
    let (model, mut log) = scene_tuned_model(model_cfg, data, cfg)?;
    let (model, s2) = finish_training(model, data, cfg)?;
    log.steps.extend(s2.steps);
    log.epochs.extend(s2.epochs);
    Ok((model, log))
}

/// Segment accuracy and routing statistics over a set of videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub segments: usize,
    pub accuracy: f64,
    pub mean_gate_entropy: f64,
    pub mean_gate: [f64; 4],
}

pub fn evaluate(model: &ModelState, videos: &[VideoSample]) -> Result<EvalSummary> {
    let mem = model.memory()?;
    let (mut n, mut correct, mut entropy, mut mass) = (0usize, 0usize, 0.0, [0.0; 4]);
    for seg in videos.iter().flat_map(|v| v.segments.iter()) {
        let pass = model.network.forward_segment(&model.tape, &seg.features, mem.as_ref(), model.switches)?;
        n += 1;
        if argmax(&pass.class_logits) == seg.class {
            correct += 1;
        }
        entropy += gate_entropy(&pass.p);
        for (m, p) in mass.iter_mut().zip(&pass.p) {
            *m += p;
        }
    }
    if n == 0 {
        return Err(IcmError::Data("evaluation split has no segments".into()));
    }
    Ok(EvalSummary {
        segments: n,
        accuracy: correct as f64 / n as f64,
        mean_gate_entropy: entropy / n as f64,
        mean_gate: mass.map(|m| m / n as f64),
    })
}
