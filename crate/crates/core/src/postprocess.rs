//! Fuzzy slot-value normalisation against an ontology of legal values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::TurnPrediction;

pub const DEFAULT_FUZZY_THRESHOLD: u32 = 80;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OntologySlot {
    pub name: String,
    pub values: Vec<String>,
    pub categorical: bool,
}

/// Slot name → legal values. Slot lookup is case-insensitive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ontology {
    slots: BTreeMap<String, OntologySlot>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SlotEntry {
    Values(Vec<String>),
    Detailed {
        values: Vec<String>,
        #[serde(default = "yes")]
        categorical: bool,
    },
}

fn yes() -> bool {
    true
}

impl Ontology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<String>, categorical: bool) -> Result<()> {
        if values.is_empty() {
            return Err(Error::Config { path: format!("ontology.{name}"), msg: "value list is empty".into() });
        }
        self.slots.insert(name.to_lowercase(), OntologySlot { name: name.to_string(), values, categorical });
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&OntologySlot> {
        self.slots.get(&name.to_lowercase())
    }

    pub fn slots(&self) -> impl Iterator<Item = &OntologySlot> {
        self.slots.values()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, SlotEntry> = serde_json::from_str(text)?;
        let mut ont = Self::new();
        for (name, entry) in raw {
            match entry {
                SlotEntry::Values(values) => ont.insert(&name, values, true)?,
                SlotEntry::Detailed { values, categorical } => ont.insert(&name, values, categorical)?,
            }
        }
        Ok(ont)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<&str, SlotEntry> = self
            .slots
            .values()
            .map(|s| {
                let entry = if s.categorical {
                    SlotEntry::Values(s.values.clone())
                } else {
                    SlotEntry::Detailed { values: s.values.clone(), categorical: false }
                };
                (s.name.as_str(), entry)
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("ontology serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Lowercases, removes punctuation, and collapses whitespace.
pub fn preprocess(s: &str) -> Vec<char> {
    let cleaned: String = s.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase().chars().collect()
}

/// Longest common block `(i, j, k)` of `a[alo..ahi]` and `b[blo..bhi]`; among maximal
/// blocks the one starting earliest in `a`, then earliest in `b`.
fn longest_match(a: &[char], b: &[char], b2j: &BTreeMap<char, Vec<usize>>, alo: usize, ahi: usize, blo: usize, bhi: usize) -> (usize, usize, usize) {
    let (mut besti, mut bestj, mut bestk) = (alo, blo, 0);
    // j2len[j + 1] = length of the match ending at (i-1, j)
    let mut j2len = vec![0usize; b.len() + 1];
    let mut next = vec![0usize; b.len() + 1];
    let mut touched: Vec<usize> = Vec::new();
    let mut next_touched: Vec<usize> = Vec::new();
    for (i, ch) in a.iter().enumerate().take(ahi).skip(alo) {
        if let Some(js) = b2j.get(ch) {
            for &j in js {
                if j < blo {
                    continue;
                }
                if j >= bhi {
                    break;
                }
                let k = j2len[j] + 1;
                next[j + 1] = k;
                next_touched.push(j + 1);
                if k > bestk {
                    besti = i + 1 - k;
                    bestj = j + 1 - k;
                    bestk = k;
                }
            }
        }
        for &t in &touched {
            j2len[t] = 0;
        }
        std::mem::swap(&mut j2len, &mut next);
        std::mem::swap(&mut touched, &mut next_touched);
        next_touched.clear();
    }
    (besti, bestj, bestk)
}

/// Total size of the matching blocks found by recursive longest-match decomposition.
pub fn matching_characters(a: &[char], b: &[char]) -> usize {
    let mut b2j: BTreeMap<char, Vec<usize>> = BTreeMap::new();
    for (j, &c) in b.iter().enumerate() {
        b2j.entry(c).or_default().push(j);
    }
    let mut total = 0;
    let mut queue = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        let (i, j, k) = longest_match(a, b, &b2j, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        total += k;
        if alo < i && blo < j {
            queue.push((alo, i, blo, j));
        }
        if i + k < ahi && j + k < bhi {
            queue.push((i + k, ahi, j + k, bhi));
        }
    }
    total
}

/// `round(100 · 2M / (|a| + |b|))` with round-half-to-even, computed exactly.
pub fn ratio_from_counts(matches: usize, total_len: usize) -> u32 {
    if total_len == 0 {
        return 100;
    }
    let num = 200 * matches;
    let (q, r) = (num / total_len, num % total_len);
    let q = if 2 * r > total_len || (2 * r == total_len && q % 2 == 1) { q + 1 } else { q };
    q as u32
}

/// Similarity in `[0, 100]` of the preprocessed strings.
pub fn similarity_ratio(a: &str, b: &str) -> u32 {
    let (a, b) = (preprocess(a), preprocess(b));
    ratio_from_counts(matching_characters(&a, &b), a.len() + b.len())
}

/// Maps `value` to its closest ontology member for categorical slots when the similarity
/// reaches `threshold`; otherwise returns it unchanged.
pub fn fuzzy_normalize(slot: &str, value: &str, ont: &Ontology, threshold: u32) -> String {
    let Some(entry) = ont.slot(slot) else {
        return value.to_string();
    };
    if !entry.categorical || entry.values.iter().any(|v| v == value) {
        return value.to_string();
    }
    let mut best: Option<(u32, &str)> = None;
    for cand in &entry.values {
        let r = similarity_ratio(value, cand);
        best = match best {
            Some((br, bc)) if br > r || (br == r && bc <= cand.as_str()) => Some((br, bc)),
            _ => Some((r, cand.as_str())),
        };
    }
    match best {
        Some((r, c)) if r >= threshold => c.to_string(),
        _ => value.to_string(),
    }
}

/// Applies [`fuzzy_normalize`] to every slot value; domains are untouched.
pub fn normalize_prediction(pred: &TurnPrediction, ont: &Ontology, threshold: u32) -> TurnPrediction {
    let mut out = pred.clone();
    for (i, (k, v)) in pred.state.slots().iter().enumerate() {
        out.state.set_value_at(i, fuzzy_normalize(k, v, ont, threshold));
    }
    out
}
