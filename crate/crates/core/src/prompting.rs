//! Dialogue state, history rendering, and the ASR / DST prompt records.
//!
//! Wire format of one DST turn (single line, fixed field order):
//!
//! ```text
//! {"dialogue_history": "<history>", "current_turn": "<asr>", "domains": ["d1"], "slots": {"d1-s": "v"}}
//! ```

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::json::{self, JsonValue};
use crate::tokenizer::ByteTokenizer;

/// Active domains plus `domain-slot → value` in first-mention order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DialogueState {
    domains: Vec<String>,
    slots: Vec<(String, String)>,
}

/// Domain part of a `domain-slot` key.
pub fn slot_domain(key: &str) -> &str {
    key.split_once('-').map_or(key, |(d, _)| d)
}

impl DialogueState {
    pub fn new(domains: Vec<String>, slots: Vec<(String, String)>) -> Result<Self> {
        let s = Self { domains, slots };
        s.validate()?;
        Ok(s)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.domains.iter().enumerate() {
            if d.trim().is_empty() {
                return Err(Error::InvalidState("empty domain name".into()));
            }
            if self.domains[..i].contains(d) {
                return Err(Error::InvalidState(format!("domain `{d}` listed twice")));
            }
        }
        for (i, (k, v)) in self.slots.iter().enumerate() {
            if !k.contains('-') {
                return Err(Error::InvalidState(format!("slot key `{k}` is not of the form domain-slot")));
            }
            if !self.domains.iter().any(|d| d == slot_domain(k)) {
                return Err(Error::InvalidState(format!("slot `{k}` refers to a domain not in {:?}", self.domains)));
            }
            if v.trim().is_empty() {
                return Err(Error::InvalidState(format!("slot `{k}` has an empty value")));
            }
            if self.slots[..i].iter().any(|(k2, _)| k2 == k) {
                return Err(Error::InvalidState(format!("slot `{k}` listed twice")));
            }
        }
        Ok(())
    }

    /// Builds a valid state from possibly inconsistent model output: empty values are
    /// dropped, later duplicates overwrite earlier ones, and missing domains are appended.
    pub fn repaired(domains: Vec<String>, slots: Vec<(String, String)>) -> Self {
        let mut s = Self::default();
        for d in domains {
            if !d.trim().is_empty() {
                s.add_domain(&d);
            }
        }
        for (k, v) in slots {
            if k.contains('-') && !v.trim().is_empty() {
                s.set(&k, &v);
            }
        }
        s
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn slots(&self) -> &[(String, String)] {
        &self.slots
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.slots.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty() && self.slots.is_empty()
    }

    pub fn add_domain(&mut self, d: &str) {
        if !self.domains.iter().any(|x| x == d) {
            self.domains.push(d.to_string());
        }
    }

    /// Sets a slot, keeping its original position if already present. The slot's domain
    /// is added when missing.
    pub fn set(&mut self, key: &str, value: &str) {
        self.add_domain(slot_domain(key));
        match self.slots.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => self.slots.push((key.to_string(), value.to_string())),
        }
    }

    pub fn set_value_at(&mut self, idx: usize, value: String) {
        self.slots[idx].1 = value;
    }

    /// True if every slot of `other` is present here with the same value.
    pub fn contains(&self, other: &DialogueState) -> bool {
        other.slots.iter().all(|(k, v)| self.get(k) == Some(v.as_str()))
            && other.domains.iter().all(|d| self.domains.contains(d))
    }
}

impl Serialize for DialogueState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        struct Slots<'a>(&'a [(String, String)]);
        impl Serialize for Slots<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                use serde::ser::SerializeMap;
                let mut m = serializer.serialize_map(Some(self.0.len()))?;
                for (k, v) in self.0 {
                    m.serialize_entry(k, v)?;
                }
                m.end()
            }
        }
        let mut st = serializer.serialize_struct("DialogueState", 2)?;
        st.serialize_field("domains", &self.domains)?;
        st.serialize_field("slots", &Slots(&self.slots))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for DialogueState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            domains: Vec<String>,
            slots: serde_json::Map<String, serde_json::Value>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let mut slots = Vec::with_capacity(raw.slots.len());
        for (k, v) in raw.slots {
            match v {
                serde_json::Value::String(s) => slots.push((k, s)),
                other => return Err(D::Error::custom(format!("slot `{k}` must be a string, got {other}"))),
            }
        }
        DialogueState::new(raw.domains, slots).map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryTurnText {
    pub speaker: Speaker,
    pub text: String,
}

impl HistoryTurnText {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Self { speaker, text: normalize_line(text) }
    }

    pub fn user(text: &str) -> Self {
        Self::new(Speaker::User, text)
    }

    pub fn agent(text: &str) -> Self {
        Self::new(Speaker::Agent, text)
    }
}

/// Replaces line breaks with spaces and collapses runs of whitespace.
pub fn normalize_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// User-only history is the user texts joined by a space; with agent turns every turn is
/// tagged `USER:` / `AGENT:`.
pub fn render_history(turns: &[HistoryTurnText], include_agent: bool) -> String {
    let mut parts = Vec::new();
    for t in turns {
        let text = normalize_line(&t.text);
        if text.is_empty() {
            continue;
        }
        match (t.speaker, include_agent) {
            (Speaker::User, false) => parts.push(text),
            (Speaker::Agent, false) => {}
            (Speaker::User, true) => parts.push(format!("USER: {text}")),
            (Speaker::Agent, true) => parts.push(format!("AGENT: {text}")),
        }
    }
    parts.join(" ")
}

/// One training or inference example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRecord {
    /// Starts with BOS; the remaining ids are the bytes of `text`.
    pub token_ids: Vec<usize>,
    /// `loss_mask[i]` marks `token_ids[i]` as a prediction target.
    pub loss_mask: Vec<bool>,
    /// Utterance whose encoder features form the soft prefix, if any.
    pub prefix_source: Option<String>,
    pub text: String,
}

impl PromptRecord {
    fn from_spans(tok: &ByteTokenizer, spans: &[(&str, bool)]) -> Self {
        let mut token_ids = vec![tok.bos];
        let mut loss_mask = vec![false];
        let mut text = String::new();
        for &(s, m) in spans {
            let ids = tok.encode(s);
            loss_mask.extend(std::iter::repeat(m).take(ids.len()));
            token_ids.extend(ids);
            text.push_str(s);
        }
        Self { token_ids, loss_mask, prefix_source: None, text }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.prefix_source = Some(source.into());
        self
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// `{"transcription": "<transcript>"}`, every text token is a target.
pub fn build_asr_prompt(transcript: &str) -> Result<PromptRecord> {
    if transcript.trim().is_empty() {
        return Err(Error::EmptyTranscript);
    }
    let text = format!("{{\"transcription\": {}}}", json_string(transcript));
    Ok(PromptRecord::from_spans(&ByteTokenizer::default(), &[(&text, true)]))
}

/// `"domains": [...], "slots": {...}` in first-mention order.
pub fn serialize_state(state: &DialogueState) -> String {
    let domains: Vec<String> = state.domains.iter().map(|d| json_string(d)).collect();
    let slots: Vec<String> = state.slots.iter().map(|(k, v)| format!("{}: {}", json_string(k), json_string(v))).collect();
    format!("\"domains\": [{}], \"slots\": {{{}}}", domains.join(", "), slots.join(", "))
}

/// Which part of a DST record is trained or left for the model to complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstPromptMode {
    /// Loss from the `"current_turn"` key through the closing brace.
    Train,
    /// Loss over the whole record, history included (text-only cascade training).
    TrainFullSchema,
    /// Prompt ends right after `"current_turn": "`; the model writes the transcription.
    InferTranscribe,
    /// Prompt carries an external transcript and ends before `"domains"`.
    InferStateOnly,
}

pub fn build_dst_prompt(history: &str, asr_hyp: &str, state: &DialogueState, mode: DstPromptMode) -> Result<PromptRecord> {
    state.validate()?;
    let tok = ByteTokenizer::default();
    let head = format!("{{\"dialogue_history\": {}, ", json_string(history));
    let rec = match mode {
        DstPromptMode::Train | DstPromptMode::TrainFullSchema => {
            let tail = format!("\"current_turn\": {}, {}}}", json_string(asr_hyp), serialize_state(state));
            let head_mask = mode == DstPromptMode::TrainFullSchema;
            PromptRecord::from_spans(&tok, &[(&head, head_mask), (&tail, true)])
        }
        DstPromptMode::InferTranscribe => PromptRecord::from_spans(&tok, &[(&head, false), ("\"current_turn\": \"", false)]),
        DstPromptMode::InferStateOnly => {
            if asr_hyp.trim().is_empty() {
                return Err(Error::EmptyTranscript);
            }
            let cur = format!("\"current_turn\": {}, ", json_string(asr_hyp));
            PromptRecord::from_spans(&tok, &[(&head, false), (&cur, false)])
        }
    };
    Ok(rec)
}

/// Convenience wrapper: training record when `train`, transcription prompt otherwise.
pub fn build_dst_record(history: &str, asr_hyp: &str, state: &DialogueState, train: bool) -> Result<PromptRecord> {
    build_dst_prompt(history, asr_hyp, state, if train { DstPromptMode::Train } else { DstPromptMode::InferTranscribe })
}

/// Drops the oldest history turns until `fits(record)` holds; never touches the current turn.
pub fn build_dst_prompt_fitted(
    turns: &[HistoryTurnText],
    include_agent: bool,
    asr_hyp: &str,
    state: &DialogueState,
    mode: DstPromptMode,
    fits: impl Fn(&PromptRecord) -> bool,
) -> Result<(PromptRecord, usize)> {
    let mut start = 0;
    loop {
        let history = render_history(&turns[start..], include_agent);
        let rec = build_dst_prompt(&history, asr_hyp, state, mode)?;
        if fits(&rec) || start == turns.len() {
            return Ok((rec, start));
        }
        start += 1;
    }
}

/// Fields recovered from a model's JSON turn output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnOutput {
    pub transcription: String,
    pub domains: Vec<String>,
    /// In output order with duplicates resolved (last occurrence wins).
    pub slots: Vec<(String, String)>,
    /// Set when a slot key appeared more than once.
    pub duplicate_keys: bool,
}

impl TurnOutput {
    pub fn state(&self) -> DialogueState {
        DialogueState::repaired(self.domains.clone(), self.slots.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseFailure {
    pub message: String,
    /// Length of the longest prefix that was still valid JSON.
    pub valid_prefix: usize,
    pub missing_field: Option<String>,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (valid prefix {} bytes)", self.message, self.valid_prefix)
    }
}

pub fn parse_turn_output(text: &str) -> std::result::Result<TurnOutput, ParseFailure> {
    let value = json::parse(text).map_err(|e| ParseFailure { message: e.message.clone(), valid_prefix: e.offset, missing_field: None })?;
    let full = text.len();
    let JsonValue::Object(entries) = value else {
        return Err(ParseFailure { message: format!("expected object, got {}", value.kind()), valid_prefix: full, missing_field: None });
    };
    let field = |name: &str| entries.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v);
    let missing = |name: &str| ParseFailure { message: format!("missing field `{name}`"), valid_prefix: full, missing_field: Some(name.to_string()) };
    let wrong = |name: &str, want: &str| ParseFailure { message: format!("field `{name}` must be {want}"), valid_prefix: full, missing_field: None };

    let transcription = field("current_turn").ok_or_else(|| missing("current_turn"))?.as_str().ok_or_else(|| wrong("current_turn", "a string"))?.to_string();
    let JsonValue::Array(items) = field("domains").ok_or_else(|| missing("domains"))? else {
        return Err(wrong("domains", "an array"));
    };
    let mut domains = Vec::new();
    for it in items {
        let d = it.as_str().ok_or_else(|| wrong("domains", "an array of strings"))?;
        if !domains.iter().any(|x: &String| x == d) {
            domains.push(d.to_string());
        }
    }
    let JsonValue::Object(raw_slots) = field("slots").ok_or_else(|| missing("slots"))? else {
        return Err(wrong("slots", "an object"));
    };
    let mut slots: Vec<(String, String)> = Vec::new();
    let mut duplicate_keys = false;
    for (k, v) in raw_slots {
        let v = v.as_str().ok_or_else(|| wrong("slots", "an object of strings"))?;
        match slots.iter_mut().find(|(k2, _)| k2 == k) {
            Some(existing) => {
                existing.1 = v.to_string();
                duplicate_keys = true;
            }
            None => slots.push((k.clone(), v.to_string())),
        }
    }
    Ok(TurnOutput { transcription, domains, slots, duplicate_keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn italian() -> DialogueState {
        DialogueState::new(vec!["restaurant".into()], vec![("restaurant-food".into(), "italian".into())]).unwrap()
    }

    const EXAMPLE: &str = r#"{"dialogue_history": "", "current_turn": "book italian", "domains": ["restaurant"], "slots": {"restaurant-food": "italian"}}"#;

    #[test]
    fn history_rendering() {
        let turns = [HistoryTurnText::user("hi"), HistoryTurnText::agent("hello")];
        assert_eq!(render_history(&[], true), "");
        assert_eq!(render_history(&turns, true), "USER: hi AGENT: hello");
        assert_eq!(render_history(&turns, false), "hi");
        assert_eq!(HistoryTurnText::user("a\nb").text, "a b");
    }

    #[test]
    fn asr_prompt_format() {
        let r = build_asr_prompt("hello").unwrap();
        assert_eq!(r.text, r#"{"transcription": "hello"}"#);
        assert_eq!(r.token_ids[0], ByteTokenizer::default().bos);
        assert!(!r.loss_mask[0]);
        assert!(r.loss_mask[1..].iter().all(|&m| m));
        assert_eq!(build_asr_prompt("say \"hi\"").unwrap().text, r#"{"transcription": "say \"hi\""}"#);
        assert!(matches!(build_asr_prompt(""), Err(Error::EmptyTranscript)));
    }

    #[test]
    fn dst_prompt_template() {
        let r = build_dst_record("", "book italian", &italian(), true).unwrap();
        assert_eq!(r.text, EXAMPLE);
        let masked: Vec<usize> = r.token_ids.iter().zip(&r.loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        let tok = ByteTokenizer::default();
        assert!(tok.decode(&masked).starts_with("\"current_turn\""));
        let inf = build_dst_record("USER: hi", "ignored", &italian(), false).unwrap();
        assert!(inf.text.ends_with("\"current_turn\": \""));
        assert!(!inf.text.contains("italian"));
    }

    #[test]
    fn full_schema_mode_trains_history() {
        let r = build_dst_prompt("USER: hi", "book italian", &italian(), DstPromptMode::TrainFullSchema).unwrap();
        assert!(r.loss_mask[1..].iter().all(|&m| m));
        let s = build_dst_prompt("h", "book italian", &italian(), DstPromptMode::InferStateOnly).unwrap();
        assert!(s.text.ends_with("\"current_turn\": \"book italian\", "));
    }

    #[test]
    fn invalid_state_rejected() {
        let bad = DialogueState { domains: vec![], slots: vec![("hotel-area".into(), "north".into())] };
        assert!(build_dst_record("", "x", &bad, true).is_err());
        assert!(DialogueState::new(vec!["hotel".into()], vec![("hotel-area".into(), "  ".into())]).is_err());
    }

    #[test]
    fn parse_example() {
        let out = parse_turn_output(EXAMPLE).unwrap();
        assert_eq!(out.transcription, "book italian");
        assert_eq!(out.domains, vec!["restaurant"]);
        assert_eq!(out.slots, vec![("restaurant-food".to_string(), "italian".to_string())]);
        assert!(!out.duplicate_keys);
    }

    #[test]
    fn parse_failures() {
        let f = parse_turn_output(&EXAMPLE[..EXAMPLE.len() - 1]).unwrap_err();
        assert_eq!(f.valid_prefix, EXAMPLE.len() - 1);
        let f = parse_turn_output(r#"{"current_turn": "x", "slots": {}}"#).unwrap_err();
        assert_eq!(f.missing_field.as_deref(), Some("domains"));
    }

    #[test]
    fn duplicate_slot_keys_last_wins() {
        let out = parse_turn_output(r#"{"current_turn": "x", "domains": ["a"], "slots": {"a-b": "1", "a-c": "2", "a-b": "3"}}"#).unwrap();
        assert_eq!(out.slots, vec![("a-b".to_string(), "3".to_string()), ("a-c".to_string(), "2".to_string())]);
        assert!(out.duplicate_keys);
    }

    #[test]
    fn serialize_state_forms() {
        assert_eq!(serialize_state(&DialogueState::empty()), r#""domains": [], "slots": {}"#);
        let mut s = DialogueState::empty();
        s.set("taxi-day", "monday");
        s.set("hotel-area", "north");
        s.set("taxi-dest", "airport");
        assert_eq!(
            serialize_state(&s),
            r#""domains": ["taxi", "hotel"], "slots": {"taxi-day": "monday", "hotel-area": "north", "taxi-dest": "airport"}"#
        );
    }

    fn arb_state() -> impl Strategy<Value = DialogueState> {
        proptest::collection::vec(("[a-c]", "[a-d]{1,3}", "[ -~]{1,8}"), 0..5).prop_map(|entries| {
            let mut s = DialogueState::empty();
            for (d, slot, v) in entries {
                if !v.trim().is_empty() {
                    s.set(&format!("{d}-{slot}"), &v);
                }
            }
            s
        })
    }

    proptest! {
        #[test]
        fn build_parse_round_trip(history in "[ -~]{0,30}", asr in "[ -~é\"\\\\]{0,20}", state in arb_state()) {
            let rec = build_dst_record(&history, &asr, &state, true).unwrap();
            let out = parse_turn_output(&rec.text).unwrap();
            prop_assert_eq!(&out.transcription, &asr);
            prop_assert_eq!(out.domains.as_slice(), state.domains());
            prop_assert_eq!(out.slots.as_slice(), state.slots());
            // serialize -> parse -> serialize is a fixed point
            prop_assert_eq!(serialize_state(&out.state()), serialize_state(&state));
        }

        #[test]
        fn loss_mask_covers_current_turn_to_end(history in "[ -~]{0,30}", asr in "[a-z ]{1,20}", state in arb_state()) {
            let rec = build_dst_record(&history, &asr, &state, true).unwrap();
            let tok = ByteTokenizer::default();
            let masked: Vec<usize> = rec.token_ids.iter().zip(&rec.loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
            let start = rec.text.find("\"current_turn\"").unwrap();
            prop_assert_eq!(tok.decode(&masked), rec.text[start..].to_string());
        }

        #[test]
        fn user_only_history_is_subsequence(texts in proptest::collection::vec(("[a-z]{1,5}( [a-z]{1,5})?", any::<bool>()), 0..6)) {
            let turns: Vec<HistoryTurnText> = texts.iter().map(|(t, user)| if *user { HistoryTurnText::user(t) } else { HistoryTurnText::agent(t) }).collect();
            let user_only = render_history(&turns, false);
            let tagged = render_history(&turns, true);
            let stripped: Vec<&str> = tagged.split(' ').filter(|w| *w != "USER:" && *w != "AGENT:").collect();
            let mut it = stripped.iter();
            for w in user_only.split(' ').filter(|w| !w.is_empty()) {
                prop_assert!(it.any(|s| s == &w));
            }
        }
    }
}
