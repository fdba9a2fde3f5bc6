//! Randomized finite-difference sweep over the whole model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_dictionary, scene_objective, ModelConfig, ModelState, Switches, TrainConfig, TrainingData};
use crate::error::Result;
use crate::layers::Activation;
use crate::numerics::tape::stream_seed;
use crate::numerics::{check_tape, Gradients, GroupCheck, ParamTape};
use crate::synthgen::{generate_samples, ChannelWidths, GeneratorConfig, Mode, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub configurations: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor.
    pub coordinates_per_group: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            configurations: 50,
            seed: 0,
            epsilon: 1e-5,
            tolerance: 1e-4,
            coordinates_per_group: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigurationCheck {
    pub index: usize,
    pub mode: Mode,
    pub input_widths: [usize; 4],
    pub frames: usize,
    pub alpha: f64,
    pub beta: f64,
    pub model: ModelConfig,
    pub max_rel_error: f64,
    pub groups: Vec<GroupCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Worst error seen for each parameter name across all configurations.
    pub groups: BTreeMap<String, f64>,
    pub configurations: Vec<ConfigurationCheck>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.groups
            .iter()
            .filter(|(_, e)| !(**e < self.tolerance))
            .map(|(n, e)| (n.as_str(), *e))
            .collect()
    }
}

fn random_case(rng: &mut ChaCha8Rng, seed: u64) -> (GeneratorConfig, ModelConfig, f64, f64) {
    let mut w = || rng.random_range(2..=5);
    let widths = ChannelWidths {
        facial: w(),
        action: w(),
        object: w(),
        background: w(),
    };
    let gen = GeneratorConfig {
        mode: if rng.random_bool(0.5) { Mode::Explicit } else { Mode::Implicit },
        num_videos: 3,
        test_fraction: 0.0,
        segments_per_video: 2,
        frames_per_segment: rng.random_range(1..=3),
        channel_widths: widths,
        max_events: 1,
        seed,
        ..GeneratorConfig::default()
    };
    let heads = rng.random_range(1..=2);
    let model = ModelConfig {
        // Without explicit internal widths the experts run at the input width.
        internal_widths: (heads > 1 || rng.random_bool(0.5)).then(|| [0; 4].map(|_| heads * rng.random_range(2..=4))),
        d_model: heads * rng.random_range(2..=4),
        layers: rng.random_range(1..=2),
        heads,
        ffn_mult: rng.random_range(1..=2),
        positional_encoding: rng.random_bool(0.5),
        attention_scaled: rng.random_bool(0.5),
        affine_moe_norm: rng.random_bool(0.5),
        iec_activation: if rng.random_bool(0.7) { Activation::Gelu } else { Activation::Identity },
        dictionary_size: rng.random_range(2..=4),
        gate_input_gradient: true,
    };
    (gen, model, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5))
}

/// Checks `L_scene + L_task + L_rb` of the full model against central
/// differences on `configurations` random architectures. `sign_flip` negates
/// the analytic gradient of every parameter whose name starts with it, which
/// a working check must report.
pub fn gradcheck_suite(cfg: &GradcheckConfig, sign_flip: Option<&str>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        tolerance: cfg.tolerance,
        epsilon: cfg.epsilon,
        max_rel_error: 0.0,
        passed: true,
        groups: BTreeMap::new(),
        configurations: Vec::with_capacity(cfg.configurations),
    };
    for index in 0..cfg.configurations {
        let case_seed = stream_seed(cfg.seed, &format!("gradcheck.{index}"));
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let (gen, model_cfg, alpha, beta) = random_case(&mut rng, case_seed);
        let (protos, train, _) = generate_samples(&gen)?;
        let data = TrainingData {
            mode: gen.mode,
            input_widths: gen.channel_widths.as_array(),
            prototypes: &protos,
            cause_boost: gen.cause_boost,
            train: &train,
            dataset_hash: None,
        };
        let mut model = ModelState::new(data.shape(), model_cfg.clone(), Switches::FULL, case_seed)?;
        let tc = TrainConfig {
            seed: case_seed,
            kmeans_max_iters: 20,
            ..TrainConfig::default()
        };
        build_dictionary(&mut model, &data, &tc)?;
        let batch: Vec<&Segment> = train.iter().flat_map(|v| v.segments.iter()).take(3).collect();
        let balance = model.network.balance_config(alpha, beta)?;
        let dict = model.dictionary.clone();
        let objective = |tape: &ParamTape, mut grads: Option<&mut Gradients>| -> Result<f64> {
            let task = model
                .network
                .batch_objective(tape, &batch, dict.as_ref(), Switches::FULL, &balance, grads.as_deref_mut())?;
            Ok(task.total() + scene_objective(&model.network, tape, &protos, gen.cause_boost, &batch, grads)?)
        };
        let mut grads = model.tape.zero_gradients();
        objective(&model.tape, Some(&mut grads))?;
        if let Some(prefix) = sign_flip {
            for id in model.tape.ids() {
                if model.tape.name(id).starts_with(prefix) {
                    grads.get_mut(id).data_mut().iter_mut().for_each(|g| *g = -*g);
                }
            }
        }
        let mut tape = model.tape.clone();
        let groups = check_tape(
            &mut tape,
            |t| objective(t, None),
            &grads,
            cfg.epsilon,
            Some(cfg.coordinates_per_group),
            case_seed,
        )?;
        let worst = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
        for g in &groups {
            let e = report.groups.entry(g.name.clone()).or_insert(0.0);
            *e = e.max(g.max_rel_error);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.configurations.push(ConfigurationCheck {
            index,
            mode: gen.mode,
            input_widths: gen.channel_widths.as_array(),
            frames: gen.frames_per_segment,
            alpha,
            beta,
            model: model_cfg,
            max_rel_error: worst,
            groups,
        });
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
