//! End-to-end runs at desk scale: dataset build, a short training run with
//! checkpointing, deterministic generation, and report evaluation.

mod common;

use candle_core::{DType, Device};

use idforge_core::config::CompareTarget;
use idforge_core::dataset::{build_dataset, read_manifest};
use idforge_core::metrics::{evaluate, EmbedderSet};
use idforge_core::toy_corpus::generate_toy_groups;
use idforge_core::trainer::train;
use idforge_core::{CustomizerModel, TrainConfig};

#[test]
fn checkpoint_round_trip_reproduces_generations() {
    let dev = Device::Cpu;
    let mut config = common::tiny_config(21);
    config.train.epochs = 1;
    let model = CustomizerModel::new(config, &dev, DType::F32).unwrap();
    let groups = generate_toy_groups(2, 2, 48, 8);
    let mut items = Vec::new();
    for g in &groups {
        items.push(
            model
                .prepare_item(
                    &g.frames[0].image,
                    &g.frames[0].mask,
                    &g.frames[1].image,
                    &g.caption,
                    &g.class_word,
                )
                .unwrap(),
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let stats = train(
        &model,
        &items,
        &model.config.train.clone(),
        Some(dir.path()),
    )
    .unwrap();
    assert!(stats.steps > 0);
    assert_eq!(stats.skipped, 0);
    assert!(dir.path().join("loss_log.csv").exists());

    let ckpt = dir.path().join("checkpoint-epoch0.safetensors");
    let reloaded = CustomizerModel::load_checkpoint(&ckpt, &dev, DType::F32).unwrap();
    assert_eq!(reloaded.config, model.config);

    let g = &groups[0];
    let a = model
        .generate(
            &g.frames[0].image,
            &g.frames[0].mask,
            &g.caption,
            &g.class_word,
            10,
            2.0,
            99,
        )
        .unwrap();
    let b = reloaded
        .generate(
            &g.frames[0].image,
            &g.frames[0].mask,
            &g.caption,
            &g.class_word,
            10,
            2.0,
            99,
        )
        .unwrap();
    assert_eq!(a.data(), b.data(), "reloaded checkpoint diverges");
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let dev = Device::Cpu;
    let model = CustomizerModel::new(common::tiny_config(4), &dev, DType::F32).unwrap();
    let groups = generate_toy_groups(1, 1, 48, 2);
    let g = &groups[0];
    let f = &g.frames[0];
    let a = model
        .generate(&f.image, &f.mask, &g.caption, &g.class_word, 8, 7.0, 5)
        .unwrap();
    let b = model
        .generate(&f.image, &f.mask, &g.caption, &g.class_word, 8, 7.0, 5)
        .unwrap();
    let c = model
        .generate(&f.image, &f.mask, &g.caption, &g.class_word, 8, 7.0, 6)
        .unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data(), "different seeds should differ");
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn evaluating_targets_as_generations_is_a_perfect_score() {
    let dir = tempfile::tempdir().unwrap();
    let groups = generate_toy_groups(3, 3, 64, 13);
    build_dataset(&groups, dir.path(), 2, 32, 2).unwrap();
    let manifest_path = dir.path().join("manifest.jsonl");
    let manifest = read_manifest(&manifest_path).unwrap();

    let gens = dir.path().join("gens");
    std::fs::create_dir_all(&gens).unwrap();
    for r in &manifest.records {
        std::fs::copy(
            dir.path().join(&r.target_image_path),
            gens.join(format!("{}.png", r.sample_id)),
        )
        .unwrap();
    }
    let cfg = idforge_core::MetricsConfig {
        compare_to: CompareTarget::Target,
        ..Default::default()
    };
    let embedders = EmbedderSet::from_config(&cfg).unwrap();
    let report = evaluate(&manifest, &manifest_path, &gens, &embedders, &cfg).unwrap();
    assert!(
        (report.clip_i - 100.0).abs() < 1e-6,
        "clip_i {}",
        report.clip_i
    );
    assert!(
        (report.dino_i - 100.0).abs() < 1e-6,
        "dino_i {}",
        report.dino_i
    );
    assert!(report.fid.abs() < 1e-6, "fid {}", report.fid);
    assert!(report.face_sim.is_none());
    assert_eq!(report.n_evaluated, manifest.records.len());
}

#[test]
fn missing_generations_are_listed_and_capped() {
    let dir = tempfile::tempdir().unwrap();
    let groups = generate_toy_groups(4, 3, 64, 17);
    build_dataset(&groups, dir.path(), 3, 16, 5).unwrap();
    let manifest_path = dir.path().join("manifest.jsonl");
    let manifest = read_manifest(&manifest_path).unwrap();
    let n = manifest.records.len();
    assert_eq!(n, 20);

    let gens = dir.path().join("gens");
    std::fs::create_dir_all(&gens).unwrap();
    // leave one sample out: 5% missing is tolerated but reported
    for r in manifest.records.iter().skip(1) {
        std::fs::copy(
            dir.path().join(&r.target_image_path),
            gens.join(format!("{}.png", r.sample_id)),
        )
        .unwrap();
    }
    let cfg = idforge_core::MetricsConfig::default();
    let embedders = EmbedderSet::from_config(&cfg).unwrap();
    let report = evaluate(&manifest, &manifest_path, &gens, &embedders, &cfg).unwrap();
    assert_eq!(report.missing, vec![manifest.records[0].sample_id.clone()]);
    assert_eq!(report.n_evaluated, n - 1);

    // drop another: 10% missing is an error
    std::fs::remove_file(gens.join(format!("{}.png", manifest.records[1].sample_id))).unwrap();
    assert!(evaluate(&manifest, &manifest_path, &gens, &embedders, &cfg).is_err());
}

#[test]
fn face_similarity_appears_only_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let groups = generate_toy_groups(2, 2, 64, 23);
    build_dataset(&groups, dir.path(), 4, 32, 2).unwrap();
    let manifest_path = dir.path().join("manifest.jsonl");
    let manifest = read_manifest(&manifest_path).unwrap();
    let gens = dir.path().join("gens");
    std::fs::create_dir_all(&gens).unwrap();
    for r in &manifest.records {
        std::fs::copy(
            dir.path().join(&r.ref_image_path),
            gens.join(format!("{}.png", r.sample_id)),
        )
        .unwrap();
    }
    let cfg = idforge_core::MetricsConfig {
        face_embedder: Some("toy:404".to_string()),
        ..Default::default()
    };
    let embedders = EmbedderSet::from_config(&cfg).unwrap();
    let report = evaluate(&manifest, &manifest_path, &gens, &embedders, &cfg).unwrap();
    assert!(report.face_sim.is_some());
}

#[test]
fn resume_training_from_checkpoint_continues() {
    let dev = Device::Cpu;
    let mut config = common::tiny_config(31);
    config.train.epochs = 1;
    let model = CustomizerModel::new(config, &dev, DType::F32).unwrap();
    let groups = generate_toy_groups(1, 2, 48, 5);
    let g = &groups[0];
    let items = vec![model
        .prepare_item(
            &g.frames[0].image,
            &g.frames[0].mask,
            &g.frames[1].image,
            &g.caption,
            &g.class_word,
        )
        .unwrap()];
    let dir = tempfile::tempdir().unwrap();
    train(
        &model,
        &items,
        &model.config.train.clone(),
        Some(dir.path()),
    )
    .unwrap();
    let reloaded = CustomizerModel::load_checkpoint(
        &dir.path().join("checkpoint-epoch0.safetensors"),
        &dev,
        DType::F32,
    )
    .unwrap();
    let items2 = vec![reloaded
        .prepare_item(
            &g.frames[0].image,
            &g.frames[0].mask,
            &g.frames[1].image,
            &g.caption,
            &g.class_word,
        )
        .unwrap()];
    let cfg2 = TrainConfig {
        max_steps: Some(1),
        ..reloaded.config.train.clone()
    };
    let stats = train(&reloaded, &items2, &cfg2, None).unwrap();
    assert_eq!(stats.steps, 1);
}
