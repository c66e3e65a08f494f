//! End-to-end training on the procedural corpus: two-phase run, freeze
//! verification by checkpoint byte comparison, determinism of metrics logs,
//! and held-out caption→image retrieval quality.

use std::time::Instant;

use picoclip_core::augment::AugmentConfig;
use picoclip_core::checkpoint::Checkpoint;
use picoclip_core::encoders::{tokenize, ModelConfig, ModelParams, ParamGroup, Vocab};
use picoclip_core::eval::{l2_normalized, mrr_at_k, rank_images};
use picoclip_core::optim::{
    train, AGCConfig, EvalCadence, ScheduleConfig, TrainConfig, TrainItem, TrainReport,
    TwoPhaseSchedule,
};
use picoclip_core::synth;

fn synth_model_config(vocab_len: usize) -> ModelConfig {
    // patch 16 keeps shape structure visible through the mean-pool fold
    ModelConfig {
        embed_dim: std::env::var("EMB").ok().and_then(|v| v.parse().ok()).unwrap_or(64),
        patch_size: 16,
        image_size: 32,
        vocab_size: vocab_len,
        max_tokens: 8,
        hidden_dim: std::env::var("HID").ok().and_then(|v| v.parse().ok()).unwrap_or(128),
        seed: std::env::var("MSEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7),
    }
}

fn synth_augment_config() -> AugmentConfig {
    // geometry strong enough to block pixel memorization while color words
    // stay truthful (hue capped); equalization off, it is destructive on
    // two-level synthetic rasters
    AugmentConfig {
        rotation_deg: envf("ROT", 15.0),
        translate_frac: envf("TRA", 0.12),
        scale_range: (1.0 - envf("SCA", 0.15), 1.0 + envf("SCA", 0.15)),
        shear_deg: 8.0,
        perspective_distortion: 0.12,
        perspective_prob: 0.5,
        equalize_prob: 0.0,
        brightness: 0.15,
        contrast: 0.15,
        saturation: 0.15,
        hue: 0.02,
    }
}

fn build_items(items: &[synth::SynthItem], vocab: &Vocab, max_tokens: usize) -> Vec<TrainItem> {
    items
        .iter()
        .map(|s| TrainItem {
            id: s.id.clone(),
            image: s.image.clone(),
            tokens: tokenize(&s.caption, vocab, max_tokens).expect("synth captions tokenize"),
        })
        .collect()
}

struct RunOutput {
    report: TrainReport,
    params: ModelParams,
    vocab: Vocab,
    train_items: Vec<TrainItem>,
    eval_items: Vec<TrainItem>,
}

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn run_training(dir: &std::path::Path) -> RunOutput {
    let (train_src, eval_src) = synth::train_eval_split();
    let vocab = Vocab::build(train_src.iter().map(|s| s.caption.as_str()), 256);
    let model_cfg = synth_model_config(vocab.len());
    let train_items = build_items(&train_src, &vocab, model_cfg.max_tokens);
    let eval_items = build_items(&eval_src, &vocab, model_cfg.max_tokens);
    let mut params = ModelParams::init(&model_cfg).unwrap();

    let cfg = TrainConfig {
        batch_size: envf("BATCH", 32.0) as usize,
        eval_cadence: EvalCadence::Epochs(2),
        phase1_patience: 3,
        phase1_min_rel_improvement: 1e-4,
        shuffle_seed: envf("SSEED", 11.0) as u64,
        augment_seed: 13,
        checkpoint_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    };
    let schedule = TwoPhaseSchedule {
        phase1: ScheduleConfig {
            eta_max: envf("LR1", 2e-3),
            eta_min: 1e-5,
            total_steps: envf("STEPS1", 280.0) as u64,
            warmup: true,
        },
        phase2: ScheduleConfig {
            eta_max: envf("LR2", 2e-3),
            eta_min: 1e-5,
            total_steps: envf("STEPS2", 3500.0) as u64,
            warmup: false,
        },
    };
    let report = train(
        &mut params,
        &vocab,
        &train_items,
        &eval_items,
        &cfg,
        &schedule,
        &AGCConfig { clip_ratio: envf("AGC", 0.01), norm_floor: 1e-3 },
        &if envf("AUG", 1.0) == 0.0 { AugmentConfig::identity() } else { synth_augment_config() },
    )
    .unwrap();
    RunOutput {
        report,
        params,
        vocab,
        train_items,
        eval_items,
    }
}

fn mrr1_over(items: &[TrainItem], model: &ModelParams) -> f64 {
    let image_embs: Vec<Vec<f64>> = items
        .iter()
        .map(|item| l2_normalized(&model.embed_image(&item.image).unwrap()))
        .collect();
    let mut rankings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let caption = l2_normalized(&model.embed_text(&item.tokens).unwrap());
        rankings.push(rank_images(&item.id, &caption, &image_embs, i).unwrap());
    }
    mrr_at_k(&rankings, 1).unwrap()
}

fn retrieval_mrr1(out: &RunOutput) -> f64 {
    // evaluate with the best checkpoint, not the final weights
    let ckpt = Checkpoint::load(&out.report.best_checkpoint).unwrap();
    let (best, _) = ckpt.to_model().unwrap();
    let image_embs: Vec<Vec<f64>> = out
        .eval_items
        .iter()
        .map(|item| l2_normalized(&best.embed_image(&item.image).unwrap()))
        .collect();
    let mut rankings = Vec::new();
    for (i, item) in out.eval_items.iter().enumerate() {
        let caption = l2_normalized(&best.embed_text(&item.tokens).unwrap());
        rankings.push(rank_images(&item.id, &caption, &image_embs, i).unwrap());
    }
    mrr_at_k(&rankings, 1).unwrap()
}

#[test]
fn two_phase_training_learns_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = run_training(dir.path());
    let elapsed = started.elapsed();
    println!("training took {elapsed:?}, {} steps", out.report.final_step);
    println!(
        "initial eval loss {:.4}, best eval loss {:.4}",
        out.report.initial_eval_loss, out.report.best_eval_loss
    );

    // strict improvement over the untrained model
    assert!(
        out.report.best_eval_loss < out.report.initial_eval_loss,
        "eval loss must improve: {} -> {}",
        out.report.initial_eval_loss,
        out.report.best_eval_loss
    );

    // best checkpoint is the minimum over all recorded evaluations
    let min_eval = out
        .report
        .evaluations
        .iter()
        .map(|e| e.eval_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.report.best_eval_loss, min_eval);

    // phase-1 tower freeze verified by checkpoint byte comparison
    let init = Checkpoint::load(&out.report.init_checkpoint).unwrap();
    let phase1 = Checkpoint::load(&out.report.phase1_end_checkpoint).unwrap();
    for group in [ParamGroup::ImageTower, ParamGroup::TextTower] {
        assert_eq!(
            init.group_bytes(group),
            phase1.group_bytes(group),
            "{group:?} must be byte-identical through phase 1"
        );
    }
    for group in [ParamGroup::ImageProj, ParamGroup::TextProj] {
        assert_ne!(
            init.group_bytes(group),
            phase1.group_bytes(group),
            "{group:?} must train during phase 1"
        );
    }

    let mrr1 = retrieval_mrr1(&out);
    let ckpt = Checkpoint::load(&out.report.best_checkpoint).unwrap();
    let (best, _) = ckpt.to_model().unwrap();
    let p1 = Checkpoint::load(&out.report.phase1_end_checkpoint).unwrap().to_model().unwrap().0;
    println!("train MRR@1 = {:.4} (best ckpt), final-weights eval MRR@1 = {:.4}, phase1-end eval MRR@1 = {:.4}",
        mrr1_over(&out.train_items[..64], &best), mrr1_over(&out.eval_items, &out.params), mrr1_over(&out.eval_items, &p1));
    println!("held-out MRR@1 = {mrr1:.4}");
    let metrics = std::fs::read_to_string(&out.report.metrics_path).unwrap();
    let train_losses: Vec<f64> = metrics.lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("train_loss").and_then(|x| x.as_f64()))
        .collect();
    let tail_mean = |v: &[f64]| v.iter().rev().take(20).sum::<f64>() / 20.0_f64.min(v.len() as f64);
    println!("final train loss (mean of last 20 steps) = {:.4}", tail_mean(&train_losses));
    for e in &out.report.evaluations { println!("  eval step {} phase {} loss {:.4}", e.step, e.phase, e.eval_loss); }
    assert!(mrr1 >= 0.5, "MRR@1 {mrr1} below 0.5");
    assert!(elapsed.as_secs() < 600, "training must stay under 10 minutes");
}

#[test]
fn identical_seeds_reproduce_metrics_logs_byte_for_byte() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();

    // shorter run for the determinism check
    let (train_src, eval_src) = synth::train_eval_split();
    let vocab = Vocab::build(train_src.iter().map(|s| s.caption.as_str()), 256);
    let model_cfg = synth_model_config(vocab.len());
    let train_items = build_items(&train_src, &vocab, model_cfg.max_tokens);
    let eval_items = build_items(&eval_src, &vocab, model_cfg.max_tokens);

    let mut run = |dir: &std::path::Path| {
        let mut params = ModelParams::init(&model_cfg).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            eval_cadence: EvalCadence::Steps(10),
            shuffle_seed: 3,
            augment_seed: 4,
            checkpoint_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        };
        let schedule = TwoPhaseSchedule {
            phase1: ScheduleConfig {
                total_steps: 20,
                ..TwoPhaseSchedule::default().phase1
            },
            phase2: ScheduleConfig {
                total_steps: 30,
                ..TwoPhaseSchedule::default().phase2
            },
        };
        let report = train(
            &mut params,
            &vocab,
            &train_items,
            &eval_items,
            &cfg,
            &schedule,
            &AGCConfig::default(),
            &AugmentConfig::default(),
        )
        .unwrap();
        (
            std::fs::read(&report.metrics_path).unwrap(),
            std::fs::read(&report.best_checkpoint).unwrap(),
        )
    };

    let (log_a, ckpt_a) = run(dir_a.path());
    let (log_b, ckpt_b) = run(dir_b.path());
    assert_eq!(log_a, log_b, "metrics logs must be byte-identical");
    assert_eq!(ckpt_a, ckpt_b, "best checkpoints must be byte-identical");
}

#[test]
fn empty_eval_split_is_a_config_error() {
    let (train_src, _) = synth::train_eval_split();
    let vocab = Vocab::build(train_src.iter().map(|s| s.caption.as_str()), 256);
    let model_cfg = synth_model_config(vocab.len());
    let train_items = build_items(&train_src[..8], &vocab, model_cfg.max_tokens);
    let mut params = ModelParams::init(&model_cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        checkpoint_dir: dir.path().to_path_buf(),
        ..TrainConfig::default()
    };
    let err = train(
        &mut params,
        &vocab,
        &train_items,
        &[],
        &cfg,
        &TwoPhaseSchedule::default(),
        &AGCConfig::default(),
        &AugmentConfig::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("eval split"), "{err}");
}
