//! Masked NLL, AdamW, warmup schedule and the staged training loops.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_cross_entropy, Graph, ParamGroup, ParamKey};
use crate::data::DialogueCorpus;
use crate::encoder::SpeechEncoder;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{Example, SpeechDstModel};
use crate::params::ParamSet;
use crate::prompting::{build_asr_prompt, build_dst_prompt_fitted, DstPromptMode, HistoryTurnText, PromptRecord};
use crate::scalar::{lit, Scalar};
use crate::tensor::Matrix;
use crate::tokenizer::ByteTokenizer;

/// Mean negative log-likelihood over masked-in rows of `logits` (`L×V`).
pub fn compute_nll<T: Scalar>(logits: &Matrix<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!("{rows} logit rows, {} targets, {} mask entries", targets.len(), mask.len())));
    }
    if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab).map(|(t, _)| t) {
        return Err(Error::Shape(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    Ok(masked_cross_entropy(logits, targets, mask).0.to_f64_lossy())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Text-only pretraining of the toy LM (stand-in for a pretrained checkpoint).
    LmPretrain,
    AsrPretrain,
    JointDst,
    FinalFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Encoder,
    Connector,
    Lm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub freeze: BTreeSet<Module>,
    pub lora: Option<LoraConfig>,
    /// Evaluations without dev improvement before stopping.
    pub early_stop_patience: usize,
    pub eval_interval: usize,
    /// Upper bound on optimizer steps; `None` runs until early stopping.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self {
            stage,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 2000,
            freeze: BTreeSet::new(),
            lora: None,
            early_stop_patience: 3,
            eval_interval: 200,
            max_steps: None,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        };
        match stage {
            Stage::LmPretrain => Self { learning_rate: 1e-3, warmup_steps: 200, ..base },
            Stage::AsrPretrain => Self { freeze: [Module::Lm].into(), ..base },
            Stage::JointDst => Self {
                batch_size: 128,
                learning_rate: 5e-5,
                warmup_steps: 500,
                freeze: [Module::Encoder, Module::Lm].into(),
                lora: Some(LoraConfig::with_rank(16)),
                ..base
            },
            Stage::FinalFt => Self {
                batch_size: 256,
                learning_rate: 5e-5,
                warmup_steps: 0,
                freeze: [Module::Encoder, Module::Lm].into(),
                lora: Some(LoraConfig::with_rank(16)),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::Config { path: path.into(), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive number");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        match self.stage {
            Stage::LmPretrain if self.lora.is_some() => bad("lora", "LM pretraining trains the base LM directly"),
            Stage::AsrPretrain if !self.freeze.contains(&Module::Lm) => bad("freeze", "asr_pretrain must freeze the LM"),
            Stage::AsrPretrain if self.lora.is_some() => bad("lora", "asr_pretrain has no adapters"),
            Stage::JointDst | Stage::FinalFt if !self.freeze.contains(&Module::Encoder) => bad("freeze", "DST stages must freeze the encoder"),
            _ => Ok(()),
        }
    }

    /// Linear warmup to the peak rate, then constant. Steps are counted from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    step: usize,
    moments: BTreeMap<ParamKey, (Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { betas, eps, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, sets: &mut [&mut ParamSet<T>], grads: &BTreeMap<ParamKey, Matrix<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, eps): (T, T, T) = (lit(b1), lit(b2), lit(self.eps));
        let step_size: T = lit(lr / bc1);
        let bc2_sqrt: T = lit(bc2.sqrt());
        let decay: T = lit(1.0 - lr * self.weight_decay);
        for set in sets.iter_mut() {
            for idx in 0..set.len() {
                let key = set.key(idx);
                let Some(g) = grads.get(&key) else { continue };
                let w = set.get_mut(idx);
                let (m, v) = self.moments.entry(key).or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
                let (wd, md, vd, gd) = (w.data_mut(), m.data_mut(), v.data_mut(), g.data());
                for i in 0..gd.len() {
                    md[i] = b1t * md[i] + (T::one() - b1t) * gd[i];
                    vd[i] = b2t * vd[i] + (T::one() - b2t) * gd[i] * gd[i];
                    let denom = vd[i].sqrt() / bc2_sqrt + eps;
                    wd[i] = wd[i] * decay - step_size * md[i] / denom;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_ce: f64,
    pub dev_ce: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean batch loss of every optimizer step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_dev_ce: Option<f64>,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Applies the freeze set of `cfg` to the model's parameter groups.
fn apply_freezing<T: Scalar>(model: &mut SpeechDstModel<T>, cfg: &StageConfig) -> Result<()> {
    let enc = !cfg.freeze.contains(&Module::Encoder);
    match &model.encoder {
        SpeechEncoder::Precomputed(_) => model.encoder.set_trainable(false)?,
        SpeechEncoder::Toy(_) => model.encoder.set_trainable(enc)?,
    }
    model.connector.params_mut().set_trainable(!cfg.freeze.contains(&Module::Connector));
    let lm_trainable = !cfg.freeze.contains(&Module::Lm) && model.lm.lora().is_none();
    model.lm.base_mut().params_mut().set_trainable(lm_trainable);
    if let Some(l) = model.lm.lora_mut() {
        l.params_mut().set_trainable(true);
    }
    Ok(())
}

const GROUPS: [ParamGroup; 4] = [ParamGroup::Encoder, ParamGroup::Connector, ParamGroup::Lm, ParamGroup::Lora];

fn trainable_groups<T: Scalar>(model: &SpeechDstModel<T>) -> Vec<ParamGroup> {
    GROUPS.into_iter().filter(|&g| model.param_set(g).is_some_and(|s| s.is_trainable() && !s.is_empty())).collect()
}

fn snapshot<T: Scalar>(model: &SpeechDstModel<T>, groups: &[ParamGroup]) -> Vec<(ParamGroup, ParamSet<T>)> {
    groups.iter().filter_map(|&g| model.param_set(g).map(|s| (g, s.clone()))).collect()
}

fn restore<T: Scalar>(model: &mut SpeechDstModel<T>, snap: Vec<(ParamGroup, ParamSet<T>)>) {
    for (g, s) in snap {
        if let Some(dst) = model.param_set_mut(g) {
            *dst = s;
        }
    }
}

/// Mean NLL over `examples`.
pub fn mean_nll<T: Scalar>(model: &SpeechDstModel<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.nll(ex)?;
    }
    Ok(total / examples.len() as f64)
}

/// Loss and summed parameter gradients over a batch (each example weighted `1/|batch|`).
pub fn batch_gradients<T: Scalar>(model: &SpeechDstModel<T>, batch: &[&Example]) -> Result<(f64, BTreeMap<ParamKey, Matrix<T>>)> {
    let mut grads: BTreeMap<ParamKey, Matrix<T>> = BTreeMap::new();
    let mut loss = 0.0;
    let w: T = lit(1.0 / batch.len() as f64);
    for ex in batch {
        let mut g = Graph::new();
        let root = model.loss_graph(&mut g, ex)?;
        loss += g.value(root).get(0, 0).to_f64_lossy();
        g.backward(root);
        for (key, grad) in g.param_grads() {
            match grads.get_mut(&key) {
                Some(acc) => acc.add_scaled(grad, w),
                None => {
                    grads.insert(key, grad.scale(w));
                }
            }
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

fn clip<T: Scalar>(grads: &mut BTreeMap<ParamKey, Matrix<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_sq().to_f64_lossy()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s: T = lit(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Deterministic epoch-wise shuffled batches over the example pool.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), cursor: 0, n, batch, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Indices of the next batch; a batch never spans two epochs.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Schedule {
    UntilPlateau,
    OneEpoch,
}

fn train_loop<T: Scalar>(model: &mut SpeechDstModel<T>, train: &[Example], dev: &[Example], cfg: &StageConfig, schedule: Schedule) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let groups = trainable_groups(model);
    if groups.is_empty() {
        return Err(Error::Config { path: "freeze".into(), msg: "no trainable parameters".into() });
    }
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed);
    let max_steps = match schedule {
        Schedule::OneEpoch => sampler.steps_per_epoch(),
        Schedule::UntilPlateau => cfg.max_steps.unwrap_or(usize::MAX),
    };
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<(ParamGroup, ParamSet<T>)>)> = None;
    let mut since_best = 0;
    let mut window = Vec::new();
    while report.steps < max_steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let (loss, mut grads) = batch_gradients(model, &batch)?;
        let step = report.steps + 1;
        let lr = cfg.lr_at(step);
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss or gradient at step {step} (loss {loss}, lr {lr:e}, {:?})", cfg.stage)));
        }
        if let Some(c) = cfg.grad_clip {
            clip(&mut grads, c);
        }
        {
            let mut sets: Vec<&mut ParamSet<T>> = Vec::new();
            let SpeechDstModel { encoder, connector, lm } = model;
            if let Some(s) = encoder.params_mut() {
                sets.push(s);
            }
            sets.push(connector.params_mut());
            let (base, lora) = lm.param_sets_mut();
            sets.push(base);
            if let Some(l) = lora {
                sets.push(l);
            }
            sets.retain(|s| s.is_trainable());
            opt.update(&mut sets, &grads, lr);
        }
        report.steps = step;
        report.losses.push(loss);
        window.push(loss);
        let at_eval = step % cfg.eval_interval == 0 || step == max_steps;
        if schedule == Schedule::UntilPlateau && at_eval {
            let train_ce = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let dev_ce = if dev.is_empty() { None } else { Some(mean_nll(model, dev)?) };
            log::info!("{:?} step {step}: train CE {train_ce:.4}, dev CE {dev_ce:?}", cfg.stage);
            report.evals.push(EvalPoint { step, train_ce, dev_ce });
            if let Some(d) = dev_ce {
                if !d.is_finite() {
                    return Err(Error::Divergence(format!("non-finite dev CE at step {step}")));
                }
                if best.as_ref().map_or(true, |(b, _)| d < *b) {
                    best = Some((d, snapshot(model, &groups)));
                    report.best_dev_ce = Some(d);
                    report.best_step = step;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        if report.best_step != report.steps {
            restore(model, snap);
        }
    }
    Ok(report)
}

/// LM-only examples: every byte of each text is a target.
pub fn text_examples(texts: &[String]) -> Vec<Example> {
    let tok = ByteTokenizer::default();
    texts
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut ids = vec![tok.bos];
            ids.extend(tok.encode(t));
            let mut mask = vec![true; ids.len()];
            mask[0] = false;
            Example { input: None, record: PromptRecord { token_ids: ids, loss_mask: mask, prefix_source: None, text: t.clone() } }
        })
        .collect()
}

pub fn asr_examples(pairs: &[(crate::encoder::UtteranceInput, String)]) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|(input, text)| Ok(Example { input: Some(input.clone()), record: build_asr_prompt(text)?.with_source(text.clone()) }))
        .collect()
}

/// One DST example per turn with gold history (user transcripts plus, if `include_agent`,
/// agent transcripts of earlier turns). The oldest history turns are dropped when the record
/// would not fit the LM context next to the soft prefix.
pub fn dst_examples<T: Scalar>(model: &SpeechDstModel<T>, corpus: &DialogueCorpus, include_agent: bool) -> Result<Vec<Example>> {
    let max_context = model.lm.spec().max_context;
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        let mut history: Vec<HistoryTurnText> = Vec::new();
        for t in &d.turns {
            let input = corpus.user_input(t);
            let prefix_len = model.connector.config().output_len(model.encoder.encode(&input)?.rows());
            let (record, _) = build_dst_prompt_fitted(&history, include_agent, &t.user_transcript, &t.state, DstPromptMode::Train, |r| {
                prefix_len + r.len() <= max_context
            })?;
            if prefix_len + record.len() > max_context {
                return Err(Error::ContextOverflow { overflow: prefix_len + record.len() - max_context, prefix: prefix_len, tokens: record.len(), max_context });
            }
            out.push(Example { input: Some(input), record: record.with_source(format!("{}#{}", d.dialogue_id, t.turn_id)) });
            history.push(HistoryTurnText::user(&t.user_transcript));
            history.push(HistoryTurnText::agent(&t.agent_transcript));
        }
    }
    Ok(out)
}

/// Text-only DST examples for a cascade LM: the current turn is given, the state is learned.
pub fn text_dst_examples(corpus: &DialogueCorpus, include_agent: bool, max_context: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        let mut history: Vec<HistoryTurnText> = Vec::new();
        for t in &d.turns {
            let current = t.asr_hypothesis.as_deref().unwrap_or(&t.user_transcript);
            let (mut record, _) =
                build_dst_prompt_fitted(&history, include_agent, current, &t.state, DstPromptMode::Train, |r| r.len() <= max_context)?;
            let state_start = record.text.rfind("\"domains\"").map(|i| i + 1).unwrap_or(0);
            for (i, m) in record.loss_mask.iter_mut().enumerate() {
                *m = *m && i >= state_start;
            }
            out.push(Example { input: None, record });
            history.push(HistoryTurnText::user(current));
            history.push(HistoryTurnText::agent(&t.agent_transcript));
        }
    }
    Ok(out)
}

/// Plain texts used to pretrain the toy LM: utterances, transcription records, rendered
/// dialogue histories and flat state objects. DST turn records are not included.
pub fn lm_pretraining_texts(corpus: &DialogueCorpus) -> Vec<String> {
    let mut texts = Vec::new();
    for d in &corpus.dialogues {
        let mut history = Vec::new();
        for t in &d.turns {
            texts.push(t.user_transcript.clone());
            texts.push(format!("{{\"transcription\": {}}}", crate::prompting::json_string(&t.user_transcript)));
            history.push(HistoryTurnText::user(&t.user_transcript));
            history.push(HistoryTurnText::agent(&t.agent_transcript));
            texts.push(crate::prompting::render_history(&history, true));
            texts.push(crate::prompting::render_history(&history, false));
            texts.push(format!("{{{}}}", crate::prompting::serialize_state(&t.state)));
        }
    }
    texts
}

/// Greedily joins consecutive texts with newlines into sequences of at most `max_bytes`
/// bytes, so pretraining covers every position the LM will see later. Longer texts are
/// kept on their own.
pub fn pack_texts(texts: &[String], max_bytes: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for t in texts {
        if !cur.is_empty() && cur.len() + 1 + t.len() > max_bytes {
            out.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push('\n');
        }
        cur.push_str(t);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn expect_stage(cfg: &StageConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config { path: "stage".into(), msg: format!("expected {stage:?}, got {:?}", cfg.stage) });
    }
    Ok(())
}

/// Trains the base LM on plain text; encoder and connector stay untouched.
pub fn pretrain_lm<T: Scalar>(model: &mut SpeechDstModel<T>, train: &[Example], dev: &[Example], cfg: &StageConfig) -> Result<TrainReport> {
    expect_stage(cfg, Stage::LmPretrain)?;
    model.encoder.set_trainable(false)?;
    model.connector.params_mut().set_trainable(false);
    model.lm.base_mut().params_mut().set_trainable(true);
    train_loop(model, train, dev, cfg, Schedule::UntilPlateau)
}

/// Stage 1: LM frozen, encoder (if trainable) and connector learn to transcribe.
pub fn train_stage1<T: Scalar>(model: &mut SpeechDstModel<T>, train: &[Example], dev: &[Example], cfg: &StageConfig) -> Result<TrainReport> {
    expect_stage(cfg, Stage::AsrPretrain)?;
    if model.lm.lora().is_some() {
        return Err(Error::Config { path: "lora".into(), msg: "asr_pretrain expects an LM without adapters".into() });
    }
    apply_freezing(model, cfg)?;
    train_loop(model, train, dev, cfg, Schedule::UntilPlateau)
}

/// Stage 2: encoder frozen, connector plus LoRA (when configured) trained on the union of
/// the given DST example pools.
pub fn train_stage2<T: Scalar>(model: &mut SpeechDstModel<T>, train: &[Vec<Example>], dev: &[Vec<Example>], cfg: &StageConfig) -> Result<TrainReport> {
    expect_stage(cfg, Stage::JointDst)?;
    if let Some(l) = &cfg.lora {
        model.attach_lora(l, cfg.seed)?;
    }
    apply_freezing(model, cfg)?;
    let train: Vec<Example> = train.iter().flatten().cloned().collect();
    let dev: Vec<Example> = dev.iter().flatten().cloned().collect();
    train_loop(model, &train, &dev, cfg, Schedule::UntilPlateau)
}

/// Exactly one epoch over the target pool (`ceil(N / batch_size)` optimizer steps).
pub fn final_finetune<T: Scalar>(model: &mut SpeechDstModel<T>, train: &[Example], cfg: &StageConfig) -> Result<TrainReport> {
    expect_stage(cfg, Stage::FinalFt)?;
    if let Some(l) = &cfg.lora {
        model.attach_lora(l, cfg.seed)?;
    }
    apply_freezing(model, cfg)?;
    train_loop(model, train, &[], cfg, Schedule::OneEpoch)
}
