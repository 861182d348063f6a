//! Joint goal accuracy and slot error rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::data::DialogueCorpus;
use crate::error::{Error, Result};
use crate::inference::{read_predictions, PredictionLine};
use crate::postprocess::{normalize_prediction, Ontology};
use crate::prompting::{slot_domain, DialogueState};

/// Value aliases applied after case and whitespace folding (`variant → canonical`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasTable {
    map: BTreeMap<String, String>,
}

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl AliasTable {
    /// Chains are resolved eagerly; cycles are rejected.
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let raw: BTreeMap<String, String> = pairs.into_iter().map(|(a, b)| (fold(&a), fold(&b))).filter(|(a, b)| a != b).collect();
        let mut map = BTreeMap::new();
        for start in raw.keys() {
            let mut seen = BTreeSet::from([start.clone()]);
            let mut cur = raw[start].clone();
            while let Some(next) = raw.get(&cur) {
                if !seen.insert(cur.clone()) {
                    return Err(Error::Config { path: format!("aliases.{start}"), msg: "alias chain forms a cycle".into() });
                }
                cur = next.clone();
            }
            if seen.contains(&cur) {
                return Err(Error::Config { path: format!("aliases.{start}"), msg: "alias chain forms a cycle".into() });
            }
            map.insert(start.clone(), cur);
        }
        Ok(Self { map })
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(raw)
    }

    fn apply(&self, v: String) -> String {
        self.map.get(&v).cloned().unwrap_or(v)
    }
}

/// Canonical, order-insensitive slot mapping of a state.
pub type CanonicalState = BTreeMap<String, String>;

/// Lowercased, trimmed and whitespace-collapsed keys and values, with aliases applied.
/// Domains are not part of the canonical form.
pub fn canonicalize(state: &DialogueState, aliases: &AliasTable) -> CanonicalState {
    state.slots().iter().map(|(k, v)| (fold(k), aliases.apply(fold(v)))).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub turns: usize,
    pub exact_turns: usize,
    pub gold_slots: usize,
    pub correct: usize,
    pub missing: usize,
    pub spurious: usize,
    pub wrong_value: usize,
}

impl SlotCounts {
    pub fn add_turn(&mut self, pred: &CanonicalState, gold: &CanonicalState) {
        self.turns += 1;
        if pred == gold {
            self.exact_turns += 1;
        }
        self.gold_slots += gold.len();
        for (k, v) in gold {
            match pred.get(k) {
                None => self.missing += 1,
                Some(p) if p == v => self.correct += 1,
                Some(_) => self.wrong_value += 1,
            }
        }
        self.spurious += pred.keys().filter(|k| !gold.contains_key(*k)).count();
    }

    pub fn jga(&self) -> f64 {
        if self.turns == 0 {
            0.0
        } else {
            self.exact_turns as f64 / self.turns as f64
        }
    }

    pub fn ser(&self) -> Ser {
        let errors = self.missing + self.spurious + self.wrong_value;
        match self.gold_slots {
            0 if self.spurious == 0 => Ser::Value(0.0),
            0 => Ser::Undefined,
            n => Ser::Value(errors as f64 / n as f64),
        }
    }
}

/// Slot error rate; undefined when there are spurious slots but no gold slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ser {
    Value(f64),
    Undefined,
}

impl Ser {
    pub fn value(&self) -> Option<f64> {
        match self {
            Ser::Value(v) => Some(*v),
            Ser::Undefined => None,
        }
    }
}

impl Serialize for Ser {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ser::Value(v) => s.serialize_f64(*v),
            Ser::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Ser {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "undefined" => Ok(Ser::Undefined),
            serde_json::Value::Number(n) => Ok(Ser::Value(n.as_f64().unwrap_or(f64::NAN))),
            other => Err(serde::de::Error::custom(format!("invalid SER value {other}"))),
        }
    }
}

impl std::fmt::Display for Ser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ser::Value(v) => write!(f, "{:.2}", 100.0 * v),
            Ser::Undefined => f.write_str("undefined"),
        }
    }
}

fn check_aligned(preds: &[DialogueState], golds: &[DialogueState]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Misaligned(format!("{} predictions for {} gold turns", preds.len(), golds.len())));
    }
    Ok(())
}

fn counts(preds: &[DialogueState], golds: &[DialogueState], aliases: &AliasTable) -> Result<SlotCounts> {
    check_aligned(preds, golds)?;
    let mut c = SlotCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        c.add_turn(&canonicalize(p, aliases), &canonicalize(g, aliases));
    }
    Ok(c)
}

/// Fraction of turns whose canonical slot mapping equals gold exactly.
pub fn joint_goal_accuracy(preds: &[DialogueState], golds: &[DialogueState], aliases: &AliasTable) -> Result<f64> {
    Ok(counts(preds, golds, aliases)?.jga())
}

/// `(missing + spurious + wrong_value) / gold slots`, accumulated over turns.
pub fn slot_error_rate(preds: &[DialogueState], golds: &[DialogueState], aliases: &AliasTable) -> Result<Ser> {
    Ok(counts(preds, golds, aliases)?.ser())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub jga: f64,
    pub ser: Ser,
    pub counts: SlotCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub ser: Ser,
    pub dialogues: usize,
    pub counts: SlotCounts,
    /// Per domain: turns where gold or prediction has a slot of that domain, restricted to
    /// that domain's slots.
    pub per_domain: BTreeMap<String, DomainScore>,
    pub fuzzy: bool,
    pub fuzzy_threshold: Option<u32>,
    pub parse_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn restrict(s: &CanonicalState, domain: &str) -> CanonicalState {
    s.iter().filter(|(k, _)| slot_domain(k) == domain).map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Scores aligned `(pred, gold)` pairs of canonical states.
pub fn report_from_pairs(pairs: &[(CanonicalState, CanonicalState)], dialogues: usize) -> EvalReport {
    let mut total = SlotCounts::default();
    let mut per: BTreeMap<String, SlotCounts> = BTreeMap::new();
    for (p, g) in pairs {
        total.add_turn(p, g);
        let domains: BTreeSet<&str> = p.keys().chain(g.keys()).map(|k| slot_domain(k)).collect();
        for d in domains {
            per.entry(d.to_string()).or_default().add_turn(&restrict(p, d), &restrict(g, d));
        }
    }
    EvalReport {
        jga: total.jga(),
        ser: total.ser(),
        dialogues,
        counts: total,
        per_domain: per.into_iter().map(|(d, c)| (d, DomainScore { jga: c.jga(), ser: c.ser(), counts: c })).collect(),
        fuzzy: false,
        fuzzy_threshold: None,
        parse_failures: 0,
        config_hash: None,
    }
}

/// Aligns predictions with the gold corpus by `(dialogue_id, turn_id)` and scores them,
/// optionally after fuzzy normalisation against `ontology`.
pub fn evaluate_lines(
    lines: &[PredictionLine],
    gold: &DialogueCorpus,
    ontology: Option<&Ontology>,
    fuzzy: bool,
    threshold: u32,
    aliases: &AliasTable,
) -> Result<EvalReport> {
    let mut by_key: BTreeMap<(&str, usize), &PredictionLine> = BTreeMap::new();
    for l in lines {
        if by_key.insert((l.dialogue_id.as_str(), l.turn_id), l).is_some() {
            return Err(Error::Misaligned(format!("duplicate prediction for dialogue `{}` turn {}", l.dialogue_id, l.turn_id)));
        }
    }
    if fuzzy && ontology.is_none() {
        return Err(Error::Config { path: "ontology".into(), msg: "fuzzy normalisation needs an ontology".into() });
    }
    let mut pairs = Vec::new();
    let mut parse_failures = 0;
    for d in &gold.dialogues {
        for t in &d.turns {
            let line = by_key
                .remove(&(d.dialogue_id.as_str(), t.turn_id))
                .ok_or_else(|| Error::Misaligned(format!("no prediction for dialogue `{}` turn {}", d.dialogue_id, t.turn_id)))?;
            let mut pred = line.prediction()?;
            if !pred.parse_ok {
                parse_failures += 1;
            }
            if fuzzy {
                pred = normalize_prediction(&pred, ontology.unwrap(), threshold);
            }
            pairs.push((canonicalize(&pred.state, aliases), canonicalize(&t.state, aliases)));
        }
    }
    if let Some(((id, turn), _)) = by_key.into_iter().next() {
        return Err(Error::Misaligned(format!("prediction for unknown dialogue `{id}` turn {turn}")));
    }
    let mut report = report_from_pairs(&pairs, gold.dialogues.len());
    report.fuzzy = fuzzy;
    report.fuzzy_threshold = fuzzy.then_some(threshold);
    report.parse_failures = parse_failures;
    report.config_hash = lines.iter().find_map(|l| l.config_hash.clone());
    Ok(report)
}

pub fn evaluate(pred_file: &Path, gold: &DialogueCorpus, ontology: Option<&Ontology>, fuzzy: bool, threshold: u32, aliases: &AliasTable) -> Result<EvalReport> {
    evaluate_lines(&read_predictions(pred_file)?, gold, ontology, fuzzy, threshold, aliases)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Human-readable table with percentages.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>7} {:>6}", "scope", "JGA[%]", "SER[%]", "turns", "slots");
        let _ = writeln!(s, "{:<16} {:>8.2} {:>8} {:>7} {:>6}", "all", 100.0 * self.jga, self.ser.to_string(), self.counts.turns, self.counts.gold_slots);
        for (d, sc) in &self.per_domain {
            let _ = writeln!(s, "{:<16} {:>8.2} {:>8} {:>7} {:>6}", d, 100.0 * sc.jga, sc.ser.to_string(), sc.counts.turns, sc.counts.gold_slots);
        }
        let c = &self.counts;
        let _ = writeln!(
            s,
            "dialogues {}  correct {}  missing {}  spurious {}  wrong {}  parse failures {}  fuzzy {}",
            self.dialogues,
            c.correct,
            c.missing,
            c.spurious,
            c.wrong_value,
            self.parse_failures,
            self.fuzzy_threshold.map_or("off".to_string(), |t| format!("on (threshold {t})"))
        );
        s
    }
}
