//! Turn-by-turn decoding of dialogues.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connector::SoftPromptSequence;
use crate::data::{Dialogue, DialogueCorpus};
use crate::encoder::UtteranceInput;
use crate::error::{Error, Result};
use crate::lm::{AdaptedLm, StopCondition};
use crate::model::SpeechDstModel;
use crate::prompting::{build_dst_prompt_fitted, parse_turn_output, DialogueState, DstPromptMode, HistoryTurnText, PromptRecord};
use crate::scalar::Scalar;
use crate::tokenizer::ByteTokenizer;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

/// Where the user side of the dialogue history comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySource {
    /// The model's own earlier transcriptions.
    SelfDecoded,
    /// Gold user transcripts.
    OracleUser,
    /// The corpus' external ASR hypotheses.
    ExternalAsr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryMode {
    pub mode: HistorySource,
    pub include_agent: bool,
}

impl Default for HistoryMode {
    fn default() -> Self {
        Self { mode: HistorySource::SelfDecoded, include_agent: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub turn_id: usize,
    pub transcription: String,
    pub state: DialogueState,
    /// Prompt text followed by the generated continuation.
    pub raw_output: String,
    pub parse_ok: bool,
    /// Rendered history that went into the prompt.
    #[serde(skip)]
    pub history: String,
}

/// Anything that can complete a DST prompt, optionally conditioned on an utterance.
pub trait TurnDecoder {
    /// Positions left for prompt plus completion once the utterance prefix is placed.
    fn budget(&self, input: Option<&UtteranceInput>) -> Result<usize>;
    /// Generated continuation text (prompt excluded).
    fn complete(&self, input: Option<&UtteranceInput>, prompt: &PromptRecord, max_new_tokens: usize) -> Result<String>;
}

fn greedy<T: Scalar>(lm: &AdaptedLm<T>, prefix: &SoftPromptSequence<T>, prompt: &PromptRecord, max_new_tokens: usize) -> Result<String> {
    let tok = ByteTokenizer::default();
    let room = lm.spec().max_context.saturating_sub(prefix.len() + prompt.len());
    let stop = StopCondition { eos: Some(tok.eos), json_close: true };
    let gen = lm.generate(prefix, &prompt.token_ids, &stop, max_new_tokens.min(room))?;
    Ok(tok.decode(&gen.tokens))
}

impl<T: Scalar> TurnDecoder for SpeechDstModel<T> {
    fn budget(&self, input: Option<&UtteranceInput>) -> Result<usize> {
        let prefix = match input {
            Some(i) => self.connector.config().output_len(self.encoder.encode(i)?.rows()),
            None => 0,
        };
        Ok(self.lm.spec().max_context.saturating_sub(prefix))
    }

    fn complete(&self, input: Option<&UtteranceInput>, prompt: &PromptRecord, max_new_tokens: usize) -> Result<String> {
        let prefix = match input {
            Some(i) => self.soft_prefix(i)?,
            None => SoftPromptSequence::empty(self.lm.spec().embed_dim),
        };
        greedy(&self.lm, &prefix, prompt, max_new_tokens)
    }
}

impl<T: Scalar> TurnDecoder for AdaptedLm<T> {
    fn budget(&self, _input: Option<&UtteranceInput>) -> Result<usize> {
        Ok(self.spec().max_context)
    }

    fn complete(&self, _input: Option<&UtteranceInput>, prompt: &PromptRecord, max_new_tokens: usize) -> Result<String> {
        greedy(self, &SoftPromptSequence::empty(self.spec().embed_dim), prompt, max_new_tokens)
    }
}

/// State reported for a turn whose output could not be parsed.
pub fn fallback_state(previous: Option<&TurnPrediction>) -> DialogueState {
    previous.map(|p| p.state.clone()).unwrap_or_default()
}

/// Best-effort transcription from a continuation that should start inside the
/// `current_turn` string: everything up to the first unescaped quote.
fn salvage_transcription(continuation: &str) -> String {
    let mut out = String::new();
    let mut chars = continuation.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => break,
            '\\' => match chars.next() {
                Some('n') | Some('t') | Some('r') => out.push(' '),
                Some(other) => out.push(other),
                None => break,
            },
            _ => out.push(c),
        }
    }
    out
}

/// Generation headroom kept free when trimming history to fit the context.
const GENERATION_RESERVE: usize = 160;

#[derive(Clone, Debug)]
pub struct InferenceOptions {
    pub max_new_tokens: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { max_new_tokens: DEFAULT_MAX_NEW_TOKENS }
    }
}

/// Turns the full prompt+continuation text into a prediction, falling back to the previous
/// state when the JSON does not parse.
pub fn interpret_output(turn_id: usize, full_text: &str, continuation: &str, transcribed: bool, previous: Option<&TurnPrediction>) -> TurnPrediction {
    match parse_turn_output(full_text) {
        Ok(out) => TurnPrediction {
            turn_id,
            transcription: out.transcription.clone(),
            state: out.state(),
            raw_output: full_text.to_string(),
            parse_ok: true,
            history: String::new(),
        },
        Err(_) => TurnPrediction {
            turn_id,
            transcription: if transcribed { salvage_transcription(continuation) } else { String::new() },
            state: fallback_state(previous),
            raw_output: full_text.to_string(),
            parse_ok: false,
            history: String::new(),
        },
    }
}

/// Decodes a dialogue turn by turn. The model transcribes and tracks each turn from its
/// utterance; the history of earlier turns is built per `hmode`.
pub fn run_dialogue<D: TurnDecoder + ?Sized>(
    model: &D,
    corpus: &DialogueCorpus,
    dialogue: &Dialogue,
    hmode: HistoryMode,
    opts: &InferenceOptions,
) -> Result<Vec<TurnPrediction>> {
    if dialogue.turns.is_empty() {
        return Err(Error::EmptyInput("dialogue"));
    }
    let mut history: Vec<HistoryTurnText> = Vec::new();
    let mut preds: Vec<TurnPrediction> = Vec::new();
    for t in &dialogue.turns {
        let input = corpus.user_input(t);
        let budget = model.budget(Some(&input))?;
        let (prompt, dropped) = build_dst_prompt_fitted(&history, hmode.include_agent, "", &DialogueState::empty(), DstPromptMode::InferTranscribe, |r| {
            r.len() + GENERATION_RESERVE <= budget
        })?;
        let rendered = crate::prompting::render_history(&history[dropped..], hmode.include_agent);
        let continuation = model.complete(Some(&input), &prompt, opts.max_new_tokens)?;
        let full = format!("{}{}", prompt.text, continuation);
        let mut pred = interpret_output(t.turn_id, &full, &continuation, true, preds.last());
        pred.history = rendered;
        let user_text = match hmode.mode {
            HistorySource::SelfDecoded => pred.transcription.clone(),
            HistorySource::OracleUser => t.user_transcript.clone(),
            HistorySource::ExternalAsr => t
                .asr_hypothesis
                .clone()
                .ok_or_else(|| Error::MissingTranscript { dialogue: dialogue.dialogue_id.clone(), turn: t.turn_id })?,
        };
        history.push(HistoryTurnText::user(&user_text));
        history.push(HistoryTurnText::agent(&t.agent_transcript));
        preds.push(pred);
    }
    Ok(preds)
}

/// Cascade decoding: the external transcript is given as `current_turn` and the model only
/// completes domains and slots. No soft prefix is used.
pub fn text_only_run<D: TurnDecoder + ?Sized>(lm: &D, dialogue: &Dialogue, include_agent: bool, opts: &InferenceOptions) -> Result<Vec<TurnPrediction>> {
    for t in &dialogue.turns {
        if t.asr_hypothesis.as_deref().map_or(true, |h| h.trim().is_empty()) {
            return Err(Error::MissingTranscript { dialogue: dialogue.dialogue_id.clone(), turn: t.turn_id });
        }
    }
    let budget = lm.budget(None)?;
    let mut history: Vec<HistoryTurnText> = Vec::new();
    let mut preds: Vec<TurnPrediction> = Vec::new();
    for t in &dialogue.turns {
        let hyp = t.asr_hypothesis.as_deref().unwrap();
        let (prompt, dropped) = build_dst_prompt_fitted(&history, include_agent, hyp, &DialogueState::empty(), DstPromptMode::InferStateOnly, |r| {
            r.len() + GENERATION_RESERVE <= budget
        })?;
        let rendered = crate::prompting::render_history(&history[dropped..], include_agent);
        let continuation = lm.complete(None, &prompt, opts.max_new_tokens)?;
        let full = format!("{}{}", prompt.text, continuation);
        let mut pred = interpret_output(t.turn_id, &full, &continuation, false, preds.last());
        pred.transcription = hyp.to_string();
        pred.history = rendered;
        history.push(HistoryTurnText::user(hyp));
        history.push(HistoryTurnText::agent(&t.agent_transcript));
        preds.push(pred);
    }
    Ok(preds)
}

/// Runs every dialogue, spreading them over `workers` threads. Output order follows the
/// corpus regardless of scheduling.
pub fn run_corpus<D: TurnDecoder + Sync + ?Sized>(
    model: &D,
    corpus: &DialogueCorpus,
    hmode: HistoryMode,
    opts: &InferenceOptions,
    workers: usize,
) -> Result<Vec<(String, Vec<TurnPrediction>)>> {
    let n = corpus.dialogues.len();
    let workers = workers.clamp(1, n.max(1));
    let mut results: Vec<Option<Result<Vec<TurnPrediction>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = n.div_ceil(workers).max(1);
        let handles: Vec<_> = corpus
            .dialogues
            .chunks(chunk)
            .map(|ds| s.spawn(move || ds.iter().map(|d| run_dialogue(model, corpus, d, hmode, opts)).collect::<Vec<_>>()))
            .collect();
        let mut i = 0;
        for h in handles {
            for r in h.join().expect("inference worker panicked") {
                results[i] = Some(r);
                i += 1;
            }
        }
    });
    corpus.dialogues.iter().zip(results).map(|(d, r)| Ok((d.dialogue_id.clone(), r.expect("every dialogue decoded")?))).collect()
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub dialogue_id: String,
    pub turn_id: usize,
    pub transcription: String,
    pub domains: Vec<String>,
    pub slots: serde_json::Map<String, serde_json::Value>,
    pub parse_ok: bool,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl PredictionLine {
    pub fn new(dialogue_id: &str, p: &TurnPrediction, config_hash: Option<&str>) -> Self {
        Self {
            dialogue_id: dialogue_id.to_string(),
            turn_id: p.turn_id,
            transcription: p.transcription.clone(),
            domains: p.state.domains().to_vec(),
            slots: p.state.slots().iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect(),
            parse_ok: p.parse_ok,
            raw_output: p.raw_output.clone(),
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn prediction(&self) -> Result<TurnPrediction> {
        let mut slots = Vec::with_capacity(self.slots.len());
        for (k, v) in &self.slots {
            let v = v.as_str().ok_or_else(|| Error::InvalidState(format!("slot `{k}` must be a string")))?;
            slots.push((k.clone(), v.to_string()));
        }
        Ok(TurnPrediction {
            turn_id: self.turn_id,
            transcription: self.transcription.clone(),
            state: DialogueState::repaired(self.domains.clone(), slots),
            raw_output: self.raw_output.clone(),
            parse_ok: self.parse_ok,
            history: String::new(),
        })
    }
}

pub fn prediction_lines(results: &[(String, Vec<TurnPrediction>)], config_hash: Option<&str>) -> Vec<PredictionLine> {
    results.iter().flat_map(|(id, preds)| preds.iter().map(move |p| PredictionLine::new(id, p, config_hash))).collect()
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("partial");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Schema { line: i + 1, path: "$".into(), msg: e.to_string() })?);
    }
    Ok(out)
}
