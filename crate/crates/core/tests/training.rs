use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechdst::config::desk_model;
use speechdst::data::{generate_synthetic, SynthSpec};
use speechdst::lm::LmSpec;
use speechdst::model::{ModelConfig, SpeechDstModel};
use speechdst::tensor::Matrix;
use speechdst::training::*;

fn tiny() -> ModelConfig {
    let mut cfg = desk_model();
    cfg.lm = LmSpec { embed_dim: 32, layers: 1, heads: 2, ffn_dim: 64, max_context: 320, ..cfg.lm };
    cfg.connector.lm_dim = 32;
    cfg
}

fn asr_set(seed: u64, n: usize) -> Vec<speechdst::model::Example> {
    let c = generate_synthetic(&SynthSpec { seed, n_dialogues: n, ..SynthSpec::default() }).unwrap();
    asr_examples(&c.asr_pairs()).unwrap()
}

#[test]
fn half_mask_is_mean_over_remaining_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Matrix::<f64>::randn(10, 259, 1.5, &mut rng);
    let targets: Vec<usize> = (0..10).map(|_| rng.gen_range(0..259)).collect();
    let mask: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
    let mut total = 0.0;
    for i in (0..10).step_by(2) {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
    }
    let got = compute_nll(&logits, &targets, &mask).unwrap();
    assert!((got - total / 5.0).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_have_near_zero_loss() {
    let mut logits = Matrix::<f64>::zeros(4, 259);
    for i in 0..4 {
        logits.set(i, i + 10, 40.0);
    }
    assert!(compute_nll(&logits, &[10, 11, 12, 13], &[true; 4]).unwrap() < 1e-12);
    assert!(compute_nll(&logits, &[10, 11, 12, 13], &[false; 4]).is_err());
}

#[test]
fn warmup_is_linear_from_step_one() {
    let cfg = StageConfig { learning_rate: 1e-3, warmup_steps: 10, ..StageConfig::for_stage(Stage::AsrPretrain) };
    assert_eq!(cfg.lr_at(1), 1e-4);
    assert!((cfg.lr_at(5) - 5e-4).abs() < 1e-18);
    assert_eq!(cfg.lr_at(10), 1e-3);
    assert_eq!(cfg.lr_at(500), 1e-3);
}

#[test]
fn mixed_corpora_sampled_in_proportion() {
    let (a, b) = (300usize, 100usize);
    let mut sampler = BatchSampler::new(a + b, 8, 3);
    let mut from_a = 0usize;
    for _ in 0..1000 {
        from_a += sampler.next_batch().iter().filter(|&&i| i < a).count();
    }
    let share = from_a as f64 / 8000.0;
    assert!((share - 0.75).abs() < 0.02, "share {share}");
    assert_eq!(BatchSampler::new(10, 3, 0).steps_per_epoch(), 4);
}

#[test]
fn stage1_keeps_lm_frozen_and_lowers_ce() {
    let mut model = SpeechDstModel::<f32>::new(&tiny(), 2).unwrap();
    let train = asr_set(11, 12);
    let dev = asr_set(12, 3);
    let lm_before = model.lm.base().params().checksum();
    let cfg = StageConfig { batch_size: 8, learning_rate: 3e-3, warmup_steps: 1, eval_interval: 5, max_steps: Some(15), early_stop_patience: 10, ..StageConfig::for_stage(Stage::AsrPretrain) };
    let report = train_stage1(&mut model, &train, &dev, &cfg).unwrap();
    assert_eq!(model.lm.base().params().checksum(), lm_before);
    let ce: Vec<f64> = report.evals.iter().map(|e| e.train_ce).collect();
    assert_eq!(ce.len(), 3);
    assert!(ce[0] > ce[1] && ce[1] > ce[2], "{ce:?}");
}

#[test]
fn stage1_rejects_trainable_lm() {
    let mut model = SpeechDstModel::<f32>::new(&tiny(), 2).unwrap();
    let mut cfg = StageConfig::for_stage(Stage::AsrPretrain);
    cfg.freeze.clear();
    assert!(train_stage1(&mut model, &asr_set(1, 2), &[], &cfg).is_err());
}

#[test]
fn stage2_connector_only_and_frozen_encoder() {
    let corpus = generate_synthetic(&SynthSpec { n_dialogues: 4, ..SynthSpec::default() }).unwrap();
    let mut model = SpeechDstModel::<f32>::new(&tiny(), 3).unwrap();
    let ex = dst_examples(&model, &corpus, true).unwrap();
    let enc = model.encoder.params().unwrap().checksum();
    let lm = model.lm.base().params().checksum();
    let conn = model.connector.params().checksum();
    let cfg = StageConfig { lora: None, batch_size: 4, learning_rate: 1e-3, warmup_steps: 0, max_steps: Some(3), ..StageConfig::for_stage(Stage::JointDst) };
    train_stage2(&mut model, &[ex], &[], &cfg).unwrap();
    assert!(model.lm.lora().is_none());
    assert_eq!(model.encoder.params().unwrap().checksum(), enc);
    assert_eq!(model.lm.base().params().checksum(), lm);
    assert_ne!(model.connector.params().checksum(), conn);
}

#[test]
fn final_finetune_runs_one_epoch_and_moves_weights() {
    let corpus = generate_synthetic(&SynthSpec { n_dialogues: 5, ..SynthSpec::default() }).unwrap();
    let mut model = SpeechDstModel::<f32>::new(&tiny(), 4).unwrap();
    let ex = dst_examples(&model, &corpus, true).unwrap();
    let conn = model.connector.params().checksum();
    let cfg = StageConfig { batch_size: 4, learning_rate: 1e-3, lora: Some(speechdst::lora::LoraConfig::with_rank(4)), ..StageConfig::for_stage(Stage::FinalFt) };
    let report = final_finetune(&mut model, &ex, &cfg).unwrap();
    assert_eq!(report.steps, ex.len().div_ceil(4));
    assert_ne!(model.connector.params().checksum(), conn);
}

#[test]
fn loss_trajectory_is_deterministic() {
    let run = || {
        let mut model = SpeechDstModel::<f32>::new(&tiny(), 9).unwrap();
        let cfg = StageConfig { batch_size: 4, learning_rate: 2e-3, warmup_steps: 2, max_steps: Some(6), eval_interval: 3, ..StageConfig::for_stage(Stage::AsrPretrain) };
        train_stage1(&mut model, &asr_set(5, 6), &asr_set(6, 2), &cfg).unwrap().losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 6);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn early_stopping_restores_best_dev_snapshot() {
    let mut model = SpeechDstModel::<f32>::new(&tiny(), 6).unwrap();
    let train = asr_set(21, 2);
    let dev = asr_set(22, 3);
    let cfg = StageConfig { batch_size: 2, learning_rate: 5e-2, warmup_steps: 0, eval_interval: 1, early_stop_patience: 2, max_steps: Some(60), ..StageConfig::for_stage(Stage::AsrPretrain) };
    let report = train_stage1(&mut model, &train, &dev, &cfg).unwrap();
    let best = report.best_dev_ce.unwrap();
    let after = mean_nll(&model, &dev).unwrap();
    assert!((after - best).abs() < 1e-9, "restored dev CE {after} vs best {best}");
    if report.stopped_early {
        assert!(report.steps < 60);
    }
}

#[test]
fn pack_texts_fills_up_to_the_limit() {
    let texts: Vec<String> = ["aaaa", "bb", "cccccc", "d"].iter().map(|s| s.to_string()).collect();
    assert_eq!(pack_texts(&texts, 8), vec!["aaaa\nbb", "cccccc\nd"]);
    assert_eq!(pack_texts(&texts, 3), vec!["aaaa", "bb", "cccccc", "d"]);
}
