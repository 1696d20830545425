//! Worked examples for each module, checked end to end through the public API.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptseg::autograd::{ParamStore, Tensor};
use promptseg::eval_harness::{binarize, dice, run_experiment, ExperimentOptions};
use promptseg::nn::Graph;
use promptseg::prompt_encoders::{one_set_row, EmbeddingConfig, PromptEncoder, PromptInput, Strategy, TextMode};
use promptseg::seg_model::{dynamic_head_len, ModelConfig, SegModel};
use promptseg::synth_data::{
    dataset_hash, generate_dataset, generate_scene, Dataset, SceneConfig, SceneMasks, Split, SplitCounts, UnitClass,
    MANIFEST_FILE,
};
use promptseg::task_engine::{
    compute_task_mask, enumerate_training_tasks, sample_point, Point, PromptBank, Regime, TaskSpec,
};
use promptseg::trainer::{lr_at, train, Adam, AdamConfig, Checkpoint, TrainConfig};
use promptseg::{Error, Mask};

fn grid(rows: &[&str]) -> Mask {
    let h = rows.len();
    let w = rows[0].len();
    Mask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
}

// ---------------------------------------------------------------- synth_data

#[test]
fn empty_unit_scene_has_exact_nucleus_count() {
    let config = SceneConfig { units_per_patch: (0, 0), nuclei_per_patch: (12, 12), seed: 7, ..SceneConfig::default() };
    let (patch, masks) = generate_scene(&config, UnitClass::Pt, 7).unwrap();
    assert!(masks.unit_mask.is_empty());
    assert_eq!(masks.nuclei_mask.components().count, 12);
    let (patch2, masks2) = generate_scene(&config, UnitClass::Pt, 7).unwrap();
    assert_eq!(patch.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), patch2.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(masks, masks2);
}

#[test]
fn every_unit_component_holds_a_nucleus() {
    let config = SceneConfig { seed: 1, ..SceneConfig::default() };
    for (i, class) in UnitClass::ALL.into_iter().enumerate() {
        let (patch, masks) = generate_scene(&config, class, 1 + i as u64).unwrap();
        assert!(patch.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let units = masks.unit_mask.components();
        let nuclei = masks.nuclei_mask.components();
        for u in 0..units.count as u32 {
            let unit = units.mask(u + 1, 64, 64);
            let whole = (0..nuclei.count as u32)
                .map(|n| nuclei.mask(n + 1, 64, 64))
                .any(|n| n.is_subset_of(&unit));
            assert!(whole, "{class}: unit component {u} has no whole nucleus");
        }
    }
}

#[test]
fn reference_and_scaled_counts() {
    assert_eq!(SplitCounts::REFERENCE.total(), 2083);
    let tenth = SplitCounts::REFERENCE.scaled(0.1).unwrap();
    assert_eq!(tenth.get(UnitClass::Dt, Split::Train), 40);
    assert_eq!(tenth.total(), 208);
}

#[test]
fn zero_counts_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SceneConfig::default(), &SplitCounts([[0; 3]; 4]), dir.path()).unwrap();
    assert!(m.records.is_empty());
    assert!(dir.path().join(MANIFEST_FILE).is_file());
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 0);
    assert!(Dataset::load(dir.path()).unwrap().samples.is_empty());
}

#[test]
fn dataset_round_trip_split_filter_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = SplitCounts([[0; 3]; 4]);
    counts.0[0] = [2, 2, 1];
    let config = SceneConfig::default();
    let manifest = generate_dataset(&config, &counts, dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.samples.len(), 5);
    for s in &data.samples {
        let (patch, masks) = generate_scene(&config, s.patch.unit_class, s.patch.seed).unwrap();
        assert_eq!(s.masks, masks);
        let max_err = patch.pixels.iter().zip(&s.patch.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }
    assert_eq!(data.split(Split::Val).count(), 2);
    assert!(data.split(Split::Test).all(|s| s.split == Split::Test));

    let victim = &manifest.records[3];
    std::fs::remove_file(dir.path().join(&victim.unit_mask_path)).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains(&victim.sample_id), "{err}");
}

#[test]
fn dataset_hash_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let counts = SplitCounts::REFERENCE.scaled(0.01).unwrap();
    let config = SceneConfig { seed: 3, ..SceneConfig::default() };
    generate_dataset(&config, &counts, a.path()).unwrap();
    generate_dataset(&config, &counts, b.path()).unwrap();
    assert_eq!(dataset_hash(a.path()).unwrap(), dataset_hash(b.path()).unwrap());
}

// ---------------------------------------------------------------- task_engine

fn example_scene() -> SceneMasks {
    SceneMasks {
        unit_mask: grid(&["###", "###", "..."]),
        nuclei_mask: grid(&["#..", "...", "..#"]),
        unit_class: UnitClass::Pt,
    }
}

#[test]
fn grid_task_masks() {
    let s = example_scene();
    let t = |task, point| compute_task_mask(&s, &TaskSpec::new(task, UnitClass::Pt, point).unwrap()).unwrap();
    assert_eq!(t(3, None), grid(&["###", "###", "..#"]));
    assert_eq!(t(4, None), grid(&["#..", "...", "..."]));
    assert_eq!(t(5, None), grid(&["...", "...", "..#"]));
    let p = Some(Point::pixel_center(0, 1, 3, 3));
    let (t8, t9) = (t(8, p), t(9, p));
    assert_eq!(t9, grid(&["...", "...", "..#"]));
    assert_eq!(t8, grid(&["#..", "...", "..."]));
    assert_eq!(t8.union(&t9).unwrap(), s.nuclei_mask);
    assert!(t8.is_disjoint(&t9));
}

#[test]
fn point_sampling_is_uniform_over_components() {
    let masks = SceneMasks {
        unit_mask: grid(&["##......", "##......", "........", ".....###", ".....###", ".....###"]),
        nuclei_mask: Mask::new(6, 8),
        unit_class: UnitClass::Dt,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let small = (0..n)
        .filter(|_| {
            let p = sample_point(&masks, 7, &mut rng).unwrap();
            p.x < 0.5
        })
        .count();
    let f = small as f64 / n as f64;
    assert!((f - 0.5).abs() <= 0.02, "small component chosen with frequency {f}");

    let empty = SceneMasks { unit_mask: Mask::new(4, 4), ..masks };
    assert!(matches!(sample_point(&empty, 7, &mut rng), Err(Error::NoValidPoint { task_id: 7 })));
}

#[test]
fn training_task_sets() {
    assert_eq!(enumerate_training_tasks(UnitClass::Pt, Regime::Incomplete), (1..=9).collect::<Vec<u8>>());
    assert_eq!(enumerate_training_tasks(UnitClass::Dt, Regime::Incomplete), vec![1, 2]);
    assert_eq!(enumerate_training_tasks(UnitClass::Capsule, Regime::Complete), (1..=9).collect::<Vec<u8>>());
}

#[test]
fn published_prompt_strings() {
    let bank = PromptBank::builtin();
    assert_eq!(
        bank.text(9, UnitClass::Capsule, 7).unwrap(),
        "There is a capsule at the given point. Segment every nucleus outside of that capsule."
    );
    let t5 = bank.task_for_published_label(5).unwrap();
    assert_eq!(bank.text(t5, UnitClass::Pt, 1).unwrap(), "Segment nuclei inside proximal tubule in this image.");
}

// ---------------------------------------------------------------- prompt_encoders

#[test]
fn fixed_id_tables_at_default_width() {
    assert_eq!(one_set_row(0, 0).unwrap(), 0);
    assert_eq!(one_set_row(3, 8).unwrap(), 35);
    let cfg = EmbeddingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    PromptEncoder::new(&mut store, &mut rng, Strategy::OneSet, TextMode::Lora, &cfg).unwrap();
    assert_eq!(store.get(store.id("prompt.one_set").unwrap()).shape(), &[36, 384]);

    let mut store = ParamStore::<f32>::new();
    let enc = PromptEncoder::new(&mut store, &mut rng, Strategy::TwoSet, TextMode::Lora, &cfg).unwrap();
    assert_eq!(store.numel(true), 4992);
    let mut g = Graph::inference(&store);
    let v = enc.encode(&mut g, &PromptInput::Ids { unit: 2, task: 4 }).unwrap();
    let out = g.value(v);
    assert_eq!(out.shape(), &[2, 384]);
    let units = store.get(store.id("prompt.units").unwrap()).data();
    let tasks = store.get(store.id("prompt.tasks").unwrap()).data();
    assert_eq!(&out.data()[..384], &units[2 * 384..3 * 384]);
    assert_eq!(&out.data()[384..], &tasks[4 * 384..5 * 384]);
}

#[test]
fn free_text_embedding_determinism_and_class_sensitivity() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = SegModel::new::<f32>(&cfg, Strategy::FreeText, TextMode::Lora, 2).unwrap();
    let bank = PromptBank::builtin();
    let (a, b) = (bank.text(1, UnitClass::Pt, 0).unwrap(), bank.text(1, UnitClass::Dt, 0).unwrap());
    let embed = |store: &ParamStore<f32>, s: &str| {
        let mut g = Graph::inference(store);
        let v = model.prompt.encode(&mut g, &PromptInput::Text(s.to_string())).unwrap();
        g.value(v).clone()
    };
    assert_eq!(embed(&store, &a), embed(&store, &a));
    assert_eq!(embed(&store, &a).shape(), &[1, cfg.encoder_dim]);

    // One optimiser step, then the class substitution must still matter.
    let mut g = Graph::training(&store, 0);
    let out = model.forward(&mut g, &vec![0.5; 16 * 16 * 3], &PromptInput::Text(a.clone()), None).unwrap();
    let loss = model.loss(&mut g, out.logits, &Mask::from_fn(16, 16, |r, _| r < 8)).unwrap();
    let grads = g.tape.backward(loss).unwrap();
    drop(g);
    Adam::new(AdamConfig::default(), store.len()).update(&mut store, &grads, 1e-3);
    assert!(embed(&store, &a).max_abs_diff(&embed(&store, &b)) > 0.0);
}

// ---------------------------------------------------------------- seg_model

fn forward_logits(model: &SegModel, store: &ParamStore<f32>, pixels: &[f32], input: &PromptInput<f32>, point: Option<Point>) -> Tensor<f32> {
    let mut g = Graph::inference(store);
    let out = model.forward(&mut g, pixels, input, point).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn desk_sequence_lengths_and_feature_size() {
    let cfg = ModelConfig::desk();
    assert_eq!(cfg.num_patches(), 64);
    assert_eq!(cfg.feature_side(), 16);
    assert_eq!(dynamic_head_len(&[(16, 8), (8, 8), (8, 2)]), 226);
    for (strategy, tokens, queries) in [(Strategy::OneSet, 1, 2), (Strategy::TwoSet, 2, 3), (Strategy::FreeText, 1, 2)] {
        let (model, store) = SegModel::new::<f32>(&cfg, strategy, TextMode::Frozen, 0).unwrap();
        let input = match strategy {
            Strategy::FreeText => PromptInput::Text("Segment the distal tubule.".into()),
            _ => PromptInput::Ids { unit: 1, task: 0 },
        };
        let mut g = Graph::inference(&store);
        let out = model.forward(&mut g, &vec![0.0; 64 * 64 * 3], &input, None).unwrap();
        assert!(out.encoder_seq_lens.iter().all(|&l| l == 64 + tokens));
        assert_eq!(out.query_count, queries);
        assert_eq!(g.value(out.features).shape(), &[16 * 16, cfg.decoder_channels]);
        assert_eq!(g.value(out.logits).shape(), &[64 * 64, 2]);
        assert!(g.value(out.logits).all_finite());
    }
}

#[test]
fn zero_weights_give_even_odds() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = SegModel::new::<f32>(&cfg, Strategy::OneSet, TextMode::Lora, 0).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let logits = forward_logits(&model, &store, &vec![0.0; 16 * 16 * 3], &PromptInput::Ids { unit: 0, task: 0 }, None);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let mut g = Graph::inference(&store);
    let l = g.tape.constant(logits);
    let p = g.tape.softmax(l).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn point_and_task_conditioning() {
    let cfg = ModelConfig::tiny();
    let (model, store) = SegModel::new::<f32>(&cfg, Strategy::TwoSet, TextMode::Lora, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pixels: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
    let ids = |task| PromptInput::Ids { unit: 1, task };
    let p1 = Some(Point { x: 0.2, y: 0.3 });
    let p2 = Some(Point { x: 0.7, y: 0.6 });
    let a = forward_logits(&model, &store, &pixels, &ids(6), p1);
    assert_eq!(a, forward_logits(&model, &store, &pixels, &ids(6), p1));
    assert!(a.max_abs_diff(&forward_logits(&model, &store, &pixels, &ids(6), p2)) > 0.0);
    let none = forward_logits(&model, &store, &pixels, &ids(0), None);
    assert_eq!(none, forward_logits(&model, &store, &pixels, &ids(0), None));
    assert!(none.max_abs_diff(&forward_logits(&model, &store, &pixels, &ids(1), None)) > 0.0);

    let mut g = Graph::inference(&store);
    let s1 = model.encode_point(&mut g, None).unwrap();
    let s2 = model.encode_point(&mut g, None).unwrap();
    let q1 = model.encode_point(&mut g, p1).unwrap();
    let q2 = model.encode_point(&mut g, p2).unwrap();
    assert_eq!(g.value(s1), g.value(s2));
    assert!(g.value(q1).max_abs_diff(g.value(q2)) > 0.0);
    assert!(model.encode_point(&mut g, Some(Point { x: 1.5, y: 0.0 })).is_err());
}

// ---------------------------------------------------------------- trainer

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 0.001);
    assert!((lr_at(1, &c) - 0.00099).abs() < 1e-15);
    assert!((lr_at(100, &c) - 3.660e-4).abs() < 1e-7);
}

fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&SceneConfig::default(), &SplitCounts::REFERENCE.scaled(0.02).unwrap(), dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

fn short(strategy: Strategy, regime: Regime, text_mode: TextMode) -> TrainConfig {
    TrainConfig { strategy, regime, text_mode, epochs: 1, samples_per_epoch: 12, val_every: 1, ..TrainConfig::default() }
}

#[test]
fn training_contracts_and_checkpoint_round_trip() {
    let (_dir, data) = tiny_dataset();
    let bank = PromptBank::builtin();

    let frozen = train(&short(Strategy::FreeText, Regime::Incomplete, TextMode::Frozen), &data, &bank, None, |_| {}).unwrap();
    assert_eq!(frozen.violations.frozen_grads, 0);
    assert_eq!(frozen.violations.regime, 0);
    assert_eq!(frozen.violations.prompt_split, 0);

    let cfg = short(Strategy::TwoSet, Regime::Complete, TextMode::Lora);
    let a = train(&cfg, &data, &bank, None, |_| {}).unwrap();
    let b = train(&cfg, &data, &bank, None, |_| {}).unwrap();
    assert_eq!(a.first_epoch_losses, b.first_epoch_losses);

    let bytes = a.checkpoint.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let (m0, s0) = a.checkpoint.restore().unwrap();
    let (m1, s1) = loaded.restore().unwrap();
    let sample = &data.samples[0];
    let input = PromptInput::Ids { unit: 0, task: 2 };
    let l0 = forward_logits(&m0, &s0, &sample.patch.pixels, &input, None);
    assert_eq!(l0.max_abs_diff(&forward_logits(&m1, &s1, &sample.patch.pixels, &input, None)), 0.0);

    let mut tampered = bytes.clone();
    let mid = tampered.len() / 2;
    tampered[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Integrity(_))));
    assert!(matches!(
        loaded.check_compatible(Strategy::OneSet, TextMode::Lora, &m1.config, false),
        Err(Error::CheckpointMismatch(_))
    ));
    assert!(loaded.check_compatible(Strategy::TwoSet, TextMode::Lora, &m1.config, false).is_ok());
}

// ---------------------------------------------------------------- eval_harness

#[test]
fn dice_and_binarize_examples() {
    let a = grid(&["##", ".."]);
    let b = grid(&["#.", "#."]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &grid(&["..", "##"])).unwrap(), 0.0);
    assert_eq!(dice(&a, &b).unwrap(), 0.5);

    assert!(binarize(&Tensor::<f32>::zeros(&[4, 2]), 2, 2).unwrap().is_empty());
    let fg = Tensor::new(&[4, 2], vec![0.0f32, 1.0, -1.0, 0.5, 2.0, 3.0, 0.0, 0.1]).unwrap();
    assert_eq!(binarize(&fg, 2, 2).unwrap().count(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m = binarize(&Tensor::new(&[100, 2], data.clone()).unwrap(), 10, 10).unwrap();
    for (i, c) in data.chunks(2).enumerate() {
        assert_eq!(m.data()[i], c[1] > c[0]);
    }
}

#[test]
fn evaluation_is_deterministic_and_reports_missing_input() {
    let (dir, data) = tiny_dataset();
    let bank = PromptBank::builtin();
    let out = train(&short(Strategy::OneSet, Regime::Complete, TextMode::Lora), &data, &bank, None, |_| {}).unwrap();
    let path = dir.path().join("one.ckpt");
    out.checkpoint.save(&path).unwrap();
    let opts = ExperimentOptions::default();
    let r1 = run_experiment(std::slice::from_ref(&path), &data, &bank, &opts).unwrap();
    let r2 = run_experiment(std::slice::from_ref(&path), &data, &bank, &opts).unwrap();
    assert_eq!(r1, r2);
    assert!(!r1.cells.is_empty());
    assert!(matches!(run_experiment(&[], &data, &bank, &opts), Err(Error::MissingInput(_))));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let r3 = run_experiment(&[path, bad], &data, &bank, &opts).unwrap();
    assert_eq!(r3.failed.len(), 1);
    assert_eq!(r3.cells, r1.cells);
}
