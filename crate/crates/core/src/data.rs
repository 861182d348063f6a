//! Corpus and feature-file formats, the synthetic dialogue generator, and ontology derivation.
//!
//! Feature file layout (little-endian): `b"SDFT"`, `u32` version (1), `u32` rows, `u32` cols,
//! then `rows * cols` `f32` values in row-major order.
//!
//! Corpus files are JSONL, one dialogue per line:
//!
//! ```text
//! {"dialogue_id": "d0", "turns": [{"turn_id": 0, "user_input": {"symbols": [3, 9]},
//!   "user_transcript": "...", "agent_transcript": "...",
//!   "state": {"domains": [...], "slots": {...}}, "asr_hypothesis": "..."}]}
//! ```
//!
//! `asr_hypothesis` is optional; every other field is required.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::UtteranceInput;
use crate::error::{Error, Result};
use crate::params::hex;
use crate::postprocess::Ontology;
use crate::prompting::DialogueState;
use crate::tensor::Matrix;

const FEATURE_MAGIC: &[u8; 4] = b"SDFT";
const FEATURE_VERSION: u32 = 1;

pub fn write_feature_file(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.data().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Matrix<f32>> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Shape(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(bad(&format!("header says {rows}x{cols} but payload has {} bytes", bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueTurn {
    pub turn_id: usize,
    pub user_input: UtteranceInput,
    pub user_transcript: String,
    /// Agent response following this user turn.
    pub agent_transcript: String,
    /// Cumulative state after this user turn.
    pub state: DialogueState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr_hypothesis: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<DialogueTurn>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogueCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Directory that relative feature paths resolve against.
    pub base_dir: Option<PathBuf>,
}

const TURN_FIELDS: [&str; 5] = ["turn_id", "user_input", "user_transcript", "agent_transcript", "state"];

fn schema(line: usize, path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema { line, path: path.into(), msg: msg.into() }
}

fn parse_dialogue_line(line_no: usize, text: &str) -> Result<Dialogue> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema(line_no, "$", e.to_string()))?;
    let Value::Object(obj) = &value else {
        return Err(schema(line_no, "$", "expected a JSON object"));
    };
    for key in obj.keys() {
        if key != "dialogue_id" && key != "turns" {
            return Err(schema(line_no, key.as_str(), "unknown field"));
        }
    }
    let id = match obj.get("dialogue_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => return Err(schema(line_no, "dialogue_id", "must be a non-empty string")),
        None => return Err(schema(line_no, "dialogue_id", "missing required field")),
    };
    let turns = match obj.get("turns") {
        Some(Value::Array(t)) => t,
        Some(_) => return Err(schema(line_no, "turns", "must be an array")),
        None => return Err(schema(line_no, "turns", "missing required field")),
    };
    let mut out = Vec::with_capacity(turns.len());
    for (i, t) in turns.iter().enumerate() {
        let at = |f: &str| format!("turns[{i}].{f}");
        let Value::Object(fields) = t else {
            return Err(schema(line_no, format!("turns[{i}]"), "expected a JSON object"));
        };
        for f in TURN_FIELDS {
            if !fields.contains_key(f) {
                return Err(schema(line_no, at(f), format!("missing required field in turn {i}")));
            }
        }
        for k in fields.keys() {
            if !TURN_FIELDS.contains(&k.as_str()) && k != "asr_hypothesis" {
                return Err(schema(line_no, at(k), "unknown field"));
            }
        }
        if fields["turn_id"].as_u64() != Some(i as u64) {
            return Err(schema(line_no, at("turn_id"), format!("expected {i} (turn ids are dense from 0)")));
        }
        for f in ["user_transcript", "agent_transcript"] {
            if !fields[f].is_string() {
                return Err(schema(line_no, at(f), "must be a string"));
            }
        }
        if let Some(h) = fields.get("asr_hypothesis") {
            if !h.is_string() {
                return Err(schema(line_no, at("asr_hypothesis"), "must be a string"));
            }
        }
        let user_input: UtteranceInput =
            serde_json::from_value(fields["user_input"].clone()).map_err(|e| schema(line_no, at("user_input"), e.to_string()))?;
        let state: DialogueState = serde_json::from_value(fields["state"].clone()).map_err(|e| schema(line_no, at("state"), e.to_string()))?;
        out.push(DialogueTurn {
            turn_id: i,
            user_input,
            user_transcript: fields["user_transcript"].as_str().unwrap().to_string(),
            agent_transcript: fields["agent_transcript"].as_str().unwrap().to_string(),
            state,
            asr_hypothesis: fields.get("asr_hypothesis").and_then(|h| h.as_str()).map(str::to_string),
        });
    }
    Ok(Dialogue { dialogue_id: id, turns: out })
}

impl DialogueCorpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        Self { dialogues, base_dir: None }
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut dialogues = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d = parse_dialogue_line(i + 1, line)?;
            if !seen.insert(d.dialogue_id.clone()) {
                return Err(schema(i + 1, "dialogue_id", format!("duplicate dialogue id `{}`", d.dialogue_id)));
            }
            dialogues.push(d);
        }
        Ok(Self::new(dialogues))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogues {
            out.push_str(&serde_json::to_string(d).expect("dialogues serialize"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut corpus = Self::from_jsonl(&text)?;
        if corpus.is_empty() {
            log::warn!("corpus {} contains no dialogues", path.display());
        }
        corpus.base_dir = path.parent().map(Path::to_path_buf);
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// sha256 of the canonical JSONL rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }

    /// Encoder input of a turn with relative feature paths resolved.
    pub fn user_input(&self, turn: &DialogueTurn) -> UtteranceInput {
        turn.user_input.resolve(self.base_dir.as_deref())
    }

    /// `(input, transcript)` for every user turn, in corpus order.
    pub fn asr_pairs(&self) -> Vec<(UtteranceInput, String)> {
        self.dialogues.iter().flat_map(|d| d.turns.iter()).map(|t| (self.user_input(t), t.user_transcript.clone())).collect()
    }
}

/// Slot name → sorted gold values, deduplicated case-insensitively (first spelling in sort
/// order wins).
pub fn derive_ontology(corpus: &DialogueCorpus) -> Ontology {
    let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        for (k, v) in t.state.slots() {
            values.entry(k.to_lowercase()).or_default().insert(v.clone());
        }
    }
    let mut ont = Ontology::new();
    for (slot, vals) in values {
        let mut seen = BTreeSet::new();
        let list: Vec<String> = vals.into_iter().filter(|v| seen.insert(v.to_lowercase())).collect();
        ont.insert(&slot, list, true).expect("derived value lists are non-empty");
    }
    ont
}

struct DomainPool {
    name: &'static str,
    slots: &'static [(&'static str, &'static [&'static str])],
}

const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "weekend"];
const AREAS: &[&str] = &["north", "south", "east", "west", "centre", "harbour", "airport", "suburb"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive", "budget", "luxury", "mid", "free", "premium"];
const COUNTS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight"];

const DOMAINS: &[DomainPool] = &[
    DomainPool {
        name: "hotel",
        slots: &[("area", AREAS), ("price", PRICES), ("stars", COUNTS), ("parking", &["free", "paid", "street", "garage", "valet", "nearby", "covered", "open"])],
    },
    DomainPool {
        name: "food",
        slots: &[("type", &["thai", "indian", "french", "greek", "chinese", "italian", "korean", "turkish"]), ("area", AREAS), ("price", PRICES), ("people", COUNTS)],
    },
    DomainPool {
        name: "taxi",
        slots: &[("day", DAYS), ("dest", &["museum", "park", "station", "airport", "harbour", "college", "market", "theatre"]), ("time", &["noon", "dusk", "dawn", "midnight", "morning", "evening", "night", "afternoon"]), ("people", COUNTS)],
    },
    DomainPool {
        name: "train",
        slots: &[("day", DAYS), ("from", &["london", "paris", "rome", "madrid", "berlin", "oslo", "vienna", "prague"]), ("seats", COUNTS), ("class", &["first", "second", "standard", "sleeper", "quiet", "family", "business", "economy"])],
    },
];

const TEMPLATE_WORDS: &[&str] = &["i", "want", "in", "ok", "do", "you", "yes", "please", "no", "thanks", "anything", "else"];

/// Parameters of the synthetic dialogue generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub n_domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    /// Probability that the agent offers an additional slot value.
    pub offer_rate: f64,
    /// Probability that the user accepts an offer.
    pub accept_rate: f64,
    /// Per-word substitution rate of the simulated external ASR hypothesis; 0 disables it.
    pub asr_error_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_dialogues: 50,
            min_turns: 1,
            max_turns: 3,
            n_domains: 2,
            slots_per_domain: 2,
            values_per_slot: 4,
            offer_rate: 0.5,
            accept_rate: 0.5,
            asr_error_rate: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, msg: String| Err(Error::Config { path: path.into(), msg });
        if !(2..=DOMAINS.len()).contains(&self.n_domains) {
            return cfg("n_domains", format!("must be in 2..={}", DOMAINS.len()));
        }
        if !(2..=4).contains(&self.slots_per_domain) {
            return cfg("slots_per_domain", "must be in 2..=4".into());
        }
        if !(3..=8).contains(&self.values_per_slot) {
            return cfg("values_per_slot", "must be in 3..=8".into());
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return cfg("min_turns", "need 1 <= min_turns <= max_turns".into());
        }
        for (name, p) in [("offer_rate", self.offer_rate), ("accept_rate", self.accept_rate), ("asr_error_rate", self.asr_error_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(name, "must be a probability".into());
            }
        }
        Ok(())
    }

    /// `(domain, slot, values)` triples active under this spec.
    pub fn schema(&self) -> Vec<(&'static str, &'static str, Vec<&'static str>)> {
        DOMAINS
            .iter()
            .take(self.n_domains)
            .flat_map(|d| d.slots.iter().take(self.slots_per_domain).map(move |(s, vals)| (d.name, *s, vals[..self.values_per_slot].to_vec())))
            .collect()
    }
}

/// Sorted word inventory of the generator; a word's symbol id is its index here.
pub fn synth_vocabulary() -> Vec<&'static str> {
    let mut words: BTreeSet<&'static str> = TEMPLATE_WORDS.iter().copied().collect();
    for d in DOMAINS {
        words.insert(d.name);
        for (s, vals) in d.slots {
            words.insert(s);
            words.extend(vals.iter().copied());
        }
    }
    words.into_iter().collect()
}

/// Symbol ids of a whitespace-separated utterance over [`synth_vocabulary`].
pub fn symbolize(text: &str) -> Result<Vec<usize>> {
    let vocab = synth_vocabulary();
    text.split_whitespace()
        .map(|w| vocab.binary_search(&w).map_err(|_| Error::Config { path: "utterance".into(), msg: format!("word `{w}` is not in the synthetic vocabulary") }))
        .collect()
}

fn corrupt<R: Rng>(text: &str, rate: f64, vocab: &[&str], rng: &mut R) -> String {
    text.split_whitespace()
        .map(|w| if rng.gen_bool(rate) { *vocab.choose(rng).unwrap() } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic template dialogues with cumulative gold states.
///
/// Users request one `value slot in domain` per turn or answer a preceding agent offer with
/// "yes please" / "no thanks"; an accepted offer enters the state without the value being
/// spoken by the user.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DialogueCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema = spec.schema();
    let vocab = synth_vocabulary();
    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for di in 0..spec.n_dialogues {
        let n_turns = rng.gen_range(spec.min_turns..=spec.max_turns);
        let mut state = DialogueState::empty();
        let mut offer: Option<(String, &str)> = None;
        let mut turns = Vec::with_capacity(n_turns);
        for ti in 0..n_turns {
            let free: Vec<usize> = (0..schema.len()).filter(|&i| state.get(&format!("{}-{}", schema[i].0, schema[i].1)).is_none()).collect();
            let user = match offer.take() {
                Some((key, value)) => {
                    if rng.gen_bool(spec.accept_rate) {
                        state.set(&key, value);
                        "yes please".to_string()
                    } else {
                        "no thanks".to_string()
                    }
                }
                None => match free.choose(&mut rng) {
                    Some(&i) => {
                        let (d, s, vals) = &schema[i];
                        let v = *vals.choose(&mut rng).unwrap();
                        state.set(&format!("{d}-{s}"), v);
                        format!("i want {v} {s} in {d}")
                    }
                    None => "no thanks".to_string(),
                },
            };
            let free: Vec<usize> = (0..schema.len()).filter(|&i| state.get(&format!("{}-{}", schema[i].0, schema[i].1)).is_none()).collect();
            let agent = match free.choose(&mut rng) {
                Some(&i) if ti + 1 < n_turns && rng.gen_bool(spec.offer_rate) => {
                    let (d, s, vals) = &schema[i];
                    let v = *vals.choose(&mut rng).unwrap();
                    offer = Some((format!("{d}-{s}"), v));
                    format!("do you want {v} {s} in {d}")
                }
                _ => "ok anything else".to_string(),
            };
            let asr_hypothesis = (spec.asr_error_rate > 0.0).then(|| corrupt(&user, spec.asr_error_rate, &vocab, &mut rng));
            turns.push(DialogueTurn {
                turn_id: ti,
                user_input: UtteranceInput::Symbols(symbolize(&user)?),
                user_transcript: user,
                agent_transcript: agent,
                state: state.clone(),
                asr_hypothesis,
            });
        }
        dialogues.push(Dialogue { dialogue_id: format!("synth-{}-{di:04}", spec.seed), turns });
    }
    Ok(DialogueCorpus::new(dialogues))
}
