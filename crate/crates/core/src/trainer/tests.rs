use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::check_tape;
use crate::synthgen::{generate_samples, ChannelWidths, GeneratorConfig, Prototypes, VideoSample};

fn tiny_gen(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        num_videos: 6,
        segments_per_video: 4,
        frames_per_segment: 2,
        channel_widths: ChannelWidths {
            facial: 4,
            action: 6,
            object: 3,
            background: 8,
        },
        seed,
        ..GeneratorConfig::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        layers: 1,
        heads: 1,
        dictionary_size: 3,
        ..ModelConfig::default()
    }
}

struct Fixture {
    protos: Prototypes,
    train: Vec<VideoSample>,
    test: Vec<VideoSample>,
    cfg: GeneratorConfig,
}

impl Fixture {
    fn new(cfg: GeneratorConfig) -> Self {
        let (protos, train, test) = generate_samples(&cfg).unwrap();
        Self { protos, train, test, cfg }
    }

    fn data(&self) -> TrainingData<'_> {
        TrainingData {
            mode: self.cfg.mode,
            input_widths: self.cfg.channel_widths.as_array(),
            prototypes: &self.protos,
            cause_boost: self.cfg.cause_boost,
            train: &self.train,
            dataset_hash: None,
        }
    }
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        stage1_epochs: epochs,
        kmeans_max_iters: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let fx = Fixture::new(tiny_gen(1));
    let mut model = ModelState::new(fx.data().shape(), tiny_model(), Switches::FULL, 3).unwrap();
    let before = model.tape.export();
    stage1_scene_tuning(&mut model, &fx.data(), &quick_train(0)).unwrap();
    assert_eq!(model.tape.export(), before);
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let fx = Fixture::new(tiny_gen(1));
    let shape = ModelShape {
        mode: Mode::Explicit,
        ..fx.data().shape()
    };
    let mut model = ModelState::new(shape, tiny_model(), Switches::FULL, 0).unwrap();
    assert!(matches!(stage1_scene_tuning(&mut model, &fx.data(), &quick_train(1)), Err(IcmError::Config(_))));
}

#[test]
fn skipped_scene_tuning_is_recorded() {
    let fx = Fixture::new(tiny_gen(2));
    let cfg = TrainConfig {
        ablation: Ablation::NoSceneTuning,
        ..quick_train(1)
    };
    let (model, log) = train_model(&tiny_model(), &fx.data(), &cfg).unwrap();
    assert!(model.stages.scene_tuning_skipped && !model.stages.scene_tuned && model.stages.omni_tuned);
    assert!(log.steps.iter().all(|s| s.stage == 2));
}

#[test]
fn forward_without_dictionary_is_a_state_error() {
    let fx = Fixture::new(tiny_gen(3));
    let model = ModelState::new(fx.data().shape(), tiny_model(), Switches::FULL, 0).unwrap();
    assert!(matches!(model.forward_full(&fx.train[0].segments[0].features), Err(IcmError::State(_))));
}

fn with_dictionary(fx: &Fixture, switches: Switches) -> ModelState {
    let mut model = ModelState::new(fx.data().shape(), tiny_model(), switches, 4).unwrap();
    build_dictionary(&mut model, &fx.data(), &quick_train(1)).unwrap();
    model
}

#[test]
fn both_ablations_reduce_to_normalized_mean() {
    let fx = Fixture::new(tiny_gen(4));
    let sw = Switches {
        sbm: false,
        iec: false,
        scene_tuning: true,
    };
    let model = ModelState::new(fx.data().shape(), tiny_model(), sw, 4).unwrap();
    let x = &fx.train[0].segments[1].features;
    let pass = model.network.forward_segment(&model.tape, x, None, sw).unwrap();
    let mut mean = vec![0.0; 6];
    for o in &pass.expert_outputs {
        for (m, v) in mean.iter_mut().zip(o.h.data()) {
            *m += v / 4.0;
        }
    }
    let (ln, _) = layer_norm(&Tensor2::row_vector(&mean), None, None, LN_EPS).unwrap();
    let (ln2, _) = layer_norm(&ln, None, None, LN_EPS).unwrap();
    for (a, b) in pass.z.iter().zip(ln2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(pass.p, vec![0.25; 4]);
}

#[test]
fn iec_toggle_leaves_routing_untouched() {
    let fx = Fixture::new(tiny_gen(5));
    let model = with_dictionary(&fx, Switches::FULL);
    let mem = model.memory().unwrap();
    let x = &fx.train[1].segments[0].features;
    let on = model.network.forward_segment(&model.tape, x, mem.as_ref(), Switches::FULL).unwrap();
    let off_sw = Switches {
        iec: false,
        ..Switches::FULL
    };
    let off = model.network.forward_segment(&model.tape, x, None, off_sw).unwrap();
    assert_eq!(on.p, off.p);
    assert_eq!(on.y_moe, off.y_moe);
    assert_ne!(on.z, off.z);
}

fn objective_gradcheck(switches: Switches, seed: u64) {
    let fx = Fixture::new(tiny_gen(10 + seed));
    let mut model = ModelState::new(
        fx.data().shape(),
        ModelConfig {
            gate_input_gradient: true,
            ..tiny_model()
        },
        switches,
        4,
    )
    .unwrap();
    build_dictionary(&mut model, &fx.data(), &quick_train(1)).unwrap();
    let batch: Vec<&Segment> = fx.train.iter().flat_map(|v| v.segments.iter()).take(3).collect();
    let balance = model.network.balance_config(0.3, 0.2).unwrap();
    let mut grads = model.tape.zero_gradients();
    let dict = model.dictionary.clone();
    model
        .network
        .batch_objective(&model.tape, &batch, dict.as_ref(), switches, &balance, Some(&mut grads))
        .unwrap();
    let mut tape = model.tape.clone();
    let report = check_tape(
        &mut tape,
        |t| Ok(model.network.batch_objective(t, &batch, dict.as_ref(), switches, &balance, None)?.total()),
        &grads,
        1e-5,
        Some(6),
        seed,
    )
    .unwrap();
    for g in &report {
        assert!(g.max_rel_error < 1e-4, "{} {}", g.name, g.max_rel_error);
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    objective_gradcheck(Switches::FULL, 0);
}

#[test]
fn ablated_objective_gradients_match_finite_differences() {
    for (i, a) in [Ablation::NoSbm, Ablation::NoIec].into_iter().enumerate() {
        objective_gradcheck(a.switches(), i as u64 + 1);
    }
}

#[test]
fn detached_router_input_only_changes_expert_gradients() {
    let fx = Fixture::new(tiny_gen(12));
    let batch: Vec<&Segment> = fx.train[0].segments.iter().collect();
    let grads_for = |through: bool| {
        let mut model = ModelState::new(
            fx.data().shape(),
            ModelConfig {
                gate_input_gradient: through,
                ..tiny_model()
            },
            Switches::FULL,
            4,
        )
        .unwrap();
        build_dictionary(&mut model, &fx.data(), &quick_train(1)).unwrap();
        let balance = model.network.balance_config(1e-4, 1e-2).unwrap();
        let mut g = model.tape.zero_gradients();
        model
            .network
            .batch_objective(&model.tape, &batch, model.dictionary.as_ref(), Switches::FULL, &balance, Some(&mut g))
            .unwrap();
        (model, g)
    };
    let (model, detached) = grads_for(false);
    let (_, through) = grads_for(true);
    for id in model.tape.ids() {
        let same = detached.get(id) == through.get(id);
        assert_eq!(same, !model.tape.name(id).starts_with("expert."), "{}", model.tape.name(id));
    }
}

#[test]
fn zero_balance_weights_leave_task_loss() {
    let fx = Fixture::new(tiny_gen(6));
    let model = with_dictionary(&fx, Switches::FULL);
    let batch: Vec<&Segment> = fx.train[0].segments.iter().collect();
    let balance = model.network.balance_config(0.0, 0.0).unwrap();
    let s = model
        .network
        .batch_objective(&model.tape, &batch, model.dictionary.as_ref(), Switches::FULL, &balance, None)
        .unwrap();
    assert_eq!(s.l_rb, 0.0);
    assert_eq!(s.total(), s.l_task);
}

#[test]
fn logged_loss_decomposes() {
    let fx = Fixture::new(tiny_gen(7));
    let (_, log) = train_model(&tiny_model(), &fx.data(), &quick_train(1)).unwrap();
    for s in log.steps.iter().filter(|s| s.stage == 2) {
        let parts = s.l_task.unwrap() + s.l_rb.unwrap();
        assert!((s.loss - parts).abs() <= 1e-12);
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let fx = Fixture::new(tiny_gen(8));
    let (a, la) = train_model(&tiny_model(), &fx.data(), &quick_train(1)).unwrap();
    let (b, lb) = train_model(&tiny_model(), &fx.data(), &quick_train(1)).unwrap();
    assert_eq!(la.steps, lb.steps);
    assert_eq!(a.tape.export(), b.tape.export());
    assert_eq!(a.dictionary, b.dictionary);
}

#[test]
fn shared_scene_tuning_matches_separate_runs() {
    let fx = Fixture::new(tiny_gen(9));
    let full = quick_train(1);
    let (shared, _) = scene_tuned_model(&tiny_model(), &fx.data(), &full).unwrap();
    for ablation in [Ablation::Full, Ablation::NoIec, Ablation::NoSbm] {
        let cfg = TrainConfig { ablation, ..quick_train(1) };
        let (alone, _) = train_model(&tiny_model(), &fx.data(), &cfg).unwrap();
        let (reused, _) = finish_training(shared.clone(), &fx.data(), &cfg).unwrap();
        assert_eq!(alone.tape.export(), reused.tape.export(), "{}", ablation.name());
        assert_eq!(alone.switches, reused.switches);
        assert_eq!(alone.dictionary, reused.dictionary);
    }
    let skip = TrainConfig {
        ablation: Ablation::NoSceneTuning,
        ..quick_train(1)
    };
    assert!(matches!(finish_training(shared, &fx.data(), &skip), Err(IcmError::State(_))));
}

fn smoke_gen() -> GeneratorConfig {
    GeneratorConfig {
        num_videos: 64,
        test_fraction: 0.0,
        confounder_strength: 0.0,
        contradiction_rate: 0.0,
        seed: 11,
        ..GeneratorConfig::default()
    }
}

fn smoke_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        layers: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn scene_tuning_reconstructs_better_than_zero() {
    let fx = Fixture::new(smoke_gen());
    let data = fx.data();
    let mut model = ModelState::new(data.shape(), smoke_model(), Switches::FULL, 1).unwrap();
    let log = stage1_scene_tuning(&mut model, &data, &TrainConfig::default()).unwrap();
    let first = log.epochs.first().unwrap().mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(last <= first, "{first} -> {last}");
    let (mut mse, mut zero) = (0.0, 0.0);
    for seg in fx.train.iter().flat_map(|v| v.segments.iter()) {
        for (e, ch) in model.network.experts().iter().zip(Channel::ALL) {
            let target = Tensor2::row_vector(&fx.protos.scene_target(seg, ch, data.cause_boost));
            mse += e.scene_loss(&model.tape, None, seg.features.channel(ch), &target, 1.0).unwrap();
            zero += target.data().iter().map(|v| v * v).sum::<f64>() / target.cols() as f64;
        }
    }
    assert!(mse < 0.5 * zero, "mse {mse} vs zero predictor {zero}");
}

#[test]
fn separable_smoke_set_is_learned() {
    let fx = Fixture::new(smoke_gen());
    let (model, log) = train_model(&smoke_model(), &fx.data(), &TrainConfig::default()).unwrap();
    let acc = evaluate(&model, &fx.train).unwrap().accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}; epochs {:?}", log.epochs);
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 4.0 } else { 0.0 }).collect()
}

#[test]
fn merge_rule_places_interval() {
    let cls: Vec<Vec<f64>> = [0, 0, 3, 3, 0].iter().map(|&k| one_hot(k, 12)).collect();
    let cause = vec![one_hot(1, 4); 5];
    let t = decode_triples(Mode::Implicit, 1.0, &cls, &cause).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!((t[0].start_s, t[0].end_s, t[0].class), (2.0, 4.0, 3));
    assert_eq!(t[0].attribution.cause_channel, Channel::Action);
    assert_eq!(t[0].attribution.class_claim, 3);
}

#[test]
fn all_normal_decodes_to_nothing() {
    let cls = vec![one_hot(0, 3); 4];
    let cause = vec![one_hot(2, 4); 4];
    assert!(decode_triples(Mode::Explicit, 1.0, &cls, &cause).unwrap().is_empty());
}

#[test]
fn hand_built_logits_decode_exactly() {
    // Segments: neutral, positive, positive, negative, neutral, negative (2 s each).
    let cls = vec![
        vec![2.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 3.0, 1.0],
        vec![0.0, 0.0, 2.0],
        vec![1.0, 0.5, 0.5],
        vec![0.0, 0.0, 0.0],
    ];
    let cause = vec![
        vec![0.0; 4],
        vec![0.0, 0.0, 2.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0, 0.0, 5.0],
        vec![0.0; 4],
        vec![1.0, 1.0, 1.0, 1.0],
    ];
    let t = decode_triples(Mode::Explicit, 2.0, &cls, &cause).unwrap();
    assert_eq!(t.len(), 2);
    let e = std::f64::consts::E;
    let p1 = e / (e + 2.0);
    let p2 = e.powi(3) / (e.powi(3) + 1.0 + e);
    assert_eq!((t[0].start_s, t[0].end_s, t[0].class), (2.0, 6.0, 1));
    assert!((t[0].attribution.confidence - (p1 + p2) / 2.0).abs() < 1e-12);
    assert_eq!(t[0].attribution.cause_channel, Channel::Object);
    assert_eq!(t[0].attribution.cause_text, crate::synthgen::templates::render_cause(Mode::Explicit, 1, Channel::Object, 0));
    assert_eq!((t[1].start_s, t[1].end_s, t[1].class), (6.0, 8.0, 2));
    assert_eq!(t[1].attribution.cause_channel, Channel::Background);
    // Segment 5 is a three-way tie resolved to the first class (neutral).
}

proptest! {
    #[test]
    fn decoding_partitions_non_normal_segments(labels in proptest::collection::vec(0usize..3, 1..20)) {
        let cls: Vec<Vec<f64>> = labels.iter().map(|&k| one_hot(k, 3)).collect();
        let cause = vec![vec![0.0; 4]; labels.len()];
        let t = decode_triples(Mode::Explicit, 1.0, &cls, &cause).unwrap();
        let mut covered = vec![0usize; labels.len()];
        for tr in &t {
            for s in tr.start_s as usize..tr.end_s as usize {
                covered[s] += 1;
                prop_assert_eq!(labels[s], tr.class);
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            prop_assert_eq!(covered[i], usize::from(l != 0));
        }
        // Re-decoding the decoded labels gives the same triples.
        let relabeled: Vec<Vec<f64>> = (0..labels.len())
            .map(|s| {
                let k = t.iter().find(|tr| (tr.start_s as usize..tr.end_s as usize).contains(&s)).map_or(0, |tr| tr.class);
                one_hot(k, 3)
            })
            .collect();
        let again = decode_triples(Mode::Explicit, 1.0, &relabeled, &cause).unwrap();
        prop_assert_eq!(
            again.iter().map(|a| (a.start_s, a.end_s, a.class)).collect::<Vec<_>>(),
            t.iter().map(|a| (a.start_s, a.end_s, a.class)).collect::<Vec<_>>()
        );
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let fx = Fixture::new(tiny_gen(9));
    let (model, _) = train_model(&tiny_model(), &fx.data(), &quick_train(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    save_checkpoint(&model, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let x = &fx.test[0].segments[0].features;
    assert_eq!(model.forward_full(x).unwrap(), loaded.forward_full(x).unwrap());
    assert_eq!(loaded.stages, model.stages);
}

#[test]
fn corrupted_checkpoints_fail_cleanly() {
    let fx = Fixture::new(tiny_gen(9));
    let model = with_dictionary(&fx, Switches::FULL);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&model, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    let bad_rows = text.replacen("\"rows\": 6", "\"rows\": 7", 1);
    assert_ne!(bad_rows, text);
    std::fs::write(&path, &bad_rows).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(IcmError::Data(_))));

    let bad_count = text.replacen("\"parameter_count\": ", "\"parameter_count\": 1", 1);
    std::fs::write(&path, &bad_count).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(IcmError::Data(_))));

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(IcmError::Data(_))));

    let newer = text.replacen("\"version\": 1", "\"version\": 2", 1);
    std::fs::write(&path, &newer).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(IcmError::Incompatible(_))));
}

#[test]
fn random_configurations_build_and_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let fx = Fixture::new(tiny_gen(rng.random_range(0..100)));
        let cfg = ModelConfig {
            layers: rng.random_range(1..3),
            positional_encoding: rng.random_bool(0.5),
            ..tiny_model()
        };
        let mut model = ModelState::new(fx.data().shape(), cfg, Switches::FULL, rng.random()).unwrap();
        build_dictionary(&mut model, &fx.data(), &quick_train(1)).unwrap();
        let (c, k, p) = model.forward_full(&fx.train[0].segments[0].features).unwrap();
        assert_eq!((c.len(), k.len(), p.len()), (12, 4, 4));
    }
}
