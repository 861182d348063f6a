//! End-to-end desk-scale pipeline: synthetic data, LM pretraining, ASR alignment, joint
//! DST training, decoding and scoring.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{derive_ontology, generate_synthetic, DialogueCorpus, SynthSpec};
use crate::error::Result;
use crate::inference::{prediction_lines, run_corpus, HistoryMode, InferenceOptions, PredictionLine};
use crate::metrics::{evaluate_lines, AliasTable, EvalReport};
use crate::model::SpeechDstModel;
use crate::postprocess::Ontology;
use crate::scalar::Scalar;
use crate::training::{asr_examples, dst_examples, lm_pretraining_texts, pack_texts, pretrain_lm, text_examples, train_stage1, train_stage2, TrainReport};

/// Seed offsets of the synthetic splits relative to `synth.seed`.
pub const LM_SPLIT: u64 = 1000;
pub const LM_DEV_SPLIT: u64 = 1001;
pub const ASR_SPLIT: u64 = 2000;
pub const ASR_DEV_SPLIT: u64 = 2001;
pub const DEV_SPLIT: u64 = 1;
pub const TEST_SPLIT: u64 = 2;

/// All corpora of one synthetic run.
#[derive(Clone, Debug)]
pub struct SyntheticSplits {
    pub lm_text: DialogueCorpus,
    pub lm_dev: DialogueCorpus,
    pub asr_train: DialogueCorpus,
    pub asr_dev: DialogueCorpus,
    pub train: DialogueCorpus,
    pub dev: DialogueCorpus,
    pub test: DialogueCorpus,
}

#[derive(Clone, Debug)]
pub struct SplitSizes {
    pub lm_text: usize,
    pub lm_dev: usize,
    pub asr_train: usize,
    pub asr_dev: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { lm_text: 300, lm_dev: 20, asr_train: 100, asr_dev: 10, dev: 10, test: 30 }
    }
}

pub fn synthetic_splits(spec: &SynthSpec, sizes: &SplitSizes) -> Result<SyntheticSplits> {
    let gen = |offset: u64, n: usize| generate_synthetic(&SynthSpec { seed: spec.seed + offset, n_dialogues: n, ..spec.clone() });
    Ok(SyntheticSplits {
        lm_text: gen(LM_SPLIT, sizes.lm_text)?,
        lm_dev: gen(LM_DEV_SPLIT, sizes.lm_dev)?,
        asr_train: gen(ASR_SPLIT, sizes.asr_train)?,
        asr_dev: gen(ASR_DEV_SPLIT, sizes.asr_dev)?,
        train: gen(0, spec.n_dialogues)?,
        dev: gen(DEV_SPLIT, sizes.dev)?,
        test: gen(TEST_SPLIT, sizes.test)?,
    })
}

/// Fresh model whose LM is pretrained on plain synthetic text.
pub fn pretrained_model<T: Scalar>(cfg: &RunConfig, text: &DialogueCorpus, dev: &DialogueCorpus) -> Result<(SpeechDstModel<T>, TrainReport)> {
    let mut model = SpeechDstModel::new(&cfg.model, cfg.seed)?;
    let span = cfg.model.lm.max_context - 1;
    let train = text_examples(&pack_texts(&lm_pretraining_texts(text), span));
    let dev = text_examples(&pack_texts(&lm_pretraining_texts(dev), span));
    let report = pretrain_lm(&mut model, &train, &dev, &cfg.lm_pretrain)?;
    Ok((model, report))
}

/// Stage 1 on at most `limit` utterances of `train`.
pub fn asr_stage<T: Scalar>(model: &mut SpeechDstModel<T>, cfg: &RunConfig, train: &DialogueCorpus, dev: &DialogueCorpus, limit: Option<usize>) -> Result<TrainReport> {
    let mut pairs = train.asr_pairs();
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    train_stage1(model, &asr_examples(&pairs)?, &asr_examples(&dev.asr_pairs())?, &cfg.stage1)
}

pub fn dst_stage<T: Scalar>(model: &mut SpeechDstModel<T>, cfg: &RunConfig, train: &[&DialogueCorpus], dev: &[&DialogueCorpus]) -> Result<TrainReport> {
    let include_agent = cfg.history.include_agent;
    let train = train.iter().map(|c| dst_examples(model, c, include_agent)).collect::<Result<Vec<_>>>()?;
    let dev = dev.iter().map(|c| dst_examples(model, c, include_agent)).collect::<Result<Vec<_>>>()?;
    train_stage2(model, &train, &dev, &cfg.stage2)
}

pub fn decode<T: Scalar>(model: &SpeechDstModel<T>, corpus: &DialogueCorpus, hmode: HistoryMode, cfg: &RunConfig) -> Result<Vec<PredictionLine>> {
    let opts = InferenceOptions { max_new_tokens: cfg.max_new_tokens };
    let results = run_corpus(model, corpus, hmode, &opts, cfg.workers)?;
    Ok(prediction_lines(&results, Some(&cfg.hash())))
}

pub fn score(lines: &[PredictionLine], gold: &DialogueCorpus, ontology: &Ontology, fuzzy: bool, cfg: &RunConfig) -> Result<EvalReport> {
    evaluate_lines(lines, gold, Some(ontology), fuzzy, cfg.fuzzy_threshold, &AliasTable::default())
}

/// Everything a full run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub lm: TrainReport,
    pub stage1: TrainReport,
    pub stage2: TrainReport,
    pub predictions: Vec<PredictionLine>,
    pub report: EvalReport,
    pub report_fuzzy: EvalReport,
}

/// Synthetic data → LM pretraining → stage 1 → stage 2 → decode `eval` split → reports.
pub fn run_full<T: Scalar>(cfg: &RunConfig, splits: &SyntheticSplits, asr_limit: Option<usize>, eval: &DialogueCorpus) -> Result<PipelineOutcome> {
    let (mut model, lm) = pretrained_model::<T>(cfg, &splits.lm_text, &splits.lm_dev)?;
    let stage1 = asr_stage(&mut model, cfg, &splits.asr_train, &splits.asr_dev, asr_limit)?;
    let stage2 = dst_stage(&mut model, cfg, &[&splits.train], &[&splits.dev])?;
    let predictions = decode(&model, eval, cfg.history, cfg)?;
    let ontology = derive_ontology(&splits.train);
    let report = score(&predictions, eval, &ontology, false, cfg)?;
    let report_fuzzy = score(&predictions, eval, &ontology, true, cfg)?;
    Ok(PipelineOutcome { lm, stage1, stage2, predictions, report, report_fuzzy })
}

/// Writes every split of `splits` plus the derived ontology into `dir`.
pub fn write_splits(splits: &SyntheticSplits, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, c) in [
        ("lm_text", &splits.lm_text),
        ("lm_dev", &splits.lm_dev),
        ("asr_train", &splits.asr_train),
        ("asr_dev", &splits.asr_dev),
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        c.save(&dir.join(format!("{name}.jsonl")))?;
    }
    derive_ontology(&splits.train).save(&dir.join("ontology.json"))
}
