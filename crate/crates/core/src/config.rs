//! Run configuration: defaults, JSON-with-comments files, dotted-path overrides, and the
//! configuration hash embedded in every artifact.
//!
//! Precedence (lowest first): built-in defaults, config file, `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::connector::ConnectorConfig;
use crate::data::{synth_vocabulary, SynthSpec};
use crate::encoder::ToyEncoderConfig;
use crate::error::{Error, Result};
use crate::inference::{HistoryMode, DEFAULT_MAX_NEW_TOKENS};
use crate::lm::LmSpec;
use crate::lora::LoraConfig;
use crate::model::{EncoderConfig, ModelConfig};
use crate::params::hex;
use crate::postprocess::DEFAULT_FUZZY_THRESHOLD;
use crate::training::{Stage, StageConfig};

/// Environment variable naming the directory relative checkpoint paths resolve against.
pub const CHECKPOINT_ROOT_ENV: &str = "SPEECHDST_HOME";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Extra DST training corpora mixed into stage 2.
    pub extra_train: Vec<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub checkpoint_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub lm_pretrain: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub final_ft: StageConfig,
    pub history: HistoryMode,
    pub fuzzy_threshold: u32,
    pub max_new_tokens: usize,
    pub workers: usize,
    pub paths: Paths,
}

/// Desk-scale model: toy encoder over the synthetic vocabulary and a small causal LM.
pub fn desk_model() -> ModelConfig {
    let enc = ToyEncoderConfig { n_symbols: synth_vocabulary().len(), dim: 32, expansion: 2, jitter: 0.1, seed: 0 };
    let lm = LmSpec { vocab_size: 259, embed_dim: 64, layers: 2, heads: 4, max_context: 512, ffn_dim: 256 };
    let connector = ConnectorConfig { stack_factor: 2, hidden: 64, layers: 1, heads: 4, ffn_dim: 128, max_positions: 128, ..ConnectorConfig::new(enc.dim, lm.embed_dim) };
    ModelConfig { encoder: EncoderConfig::Toy(enc), connector, lm }
}

impl Default for RunConfig {
    fn default() -> Self {
        let with = |stage, lr, warmup, batch| StageConfig { learning_rate: lr, warmup_steps: warmup, batch_size: batch, eval_interval: 50, ..StageConfig::for_stage(stage) };
        Self {
            seed: 7,
            model: desk_model(),
            synth: SynthSpec::default(),
            lm_pretrain: StageConfig { max_steps: Some(1200), eval_interval: 200, ..with(Stage::LmPretrain, 3e-3, 50, 8) },
            stage1: StageConfig { max_steps: Some(1500), eval_interval: 100, ..with(Stage::AsrPretrain, 2e-3, 100, 16) },
            stage2: StageConfig { max_steps: Some(1200), eval_interval: 200, lora: Some(LoraConfig::with_rank(16)), ..with(Stage::JointDst, 4e-3, 100, 16) },
            final_ft: StageConfig { lora: Some(LoraConfig::with_rank(16)), ..with(Stage::FinalFt, 1e-3, 0, 32) },
            history: HistoryMode::default(),
            fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            workers: 1,
            paths: Paths::default(),
        }
    }
}

/// Removes `//` and `/* */` comments outside string literals.
pub fn strip_comments(text: &str) -> String {
    let b = text.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let (mut i, mut in_str, mut esc) = (0, false, false);
    while i < b.len() {
        let c = b[i];
        if in_str {
            out.push(c);
            if esc {
                esc = false;
            } else if c == b'\\' {
                esc = true;
            } else if c == b'"' {
                in_str = false;
            }
            i += 1;
        } else if c == b'"' {
            in_str = true;
            out.push(c);
            i += 1;
        } else if c == b'/' && b.get(i + 1) == Some(&b'/') {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if c == b'/' && b.get(i + 1) == Some(&b'*') {
            i += 2;
            while i + 1 < b.len() && !(b[i] == b'*' && b[i + 1] == b'/') {
                if b[i] == b'\n' {
                    out.push(b'\n');
                }
                i += 1;
            }
            i += 2;
        } else {
            out.push(c);
            i += 1;
        }
    }
    String::from_utf8(out).expect("comment stripping keeps utf-8 boundaries")
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets `a.b.c` in `root` to `raw`, parsed as JSON when possible and as a string otherwise.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config { path: parts[..i].join("."), msg: "is not an object".into() });
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}

impl RunConfig {
    /// Builds a config from defaults, an optional file, and `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let patch: Value = serde_json::from_str(&strip_comments(&text))
                .map_err(|e| Error::Config { path: path.display().to_string(), msg: e.to_string() })?;
            merge(&mut root, patch);
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config { path: o.clone(), msg: "override must look like key.path=value".into() })?;
            set_path(&mut root, k.trim(), v.trim())?;
        }
        let cfg: Self = serde_path_to_error::deserialize(root).map_err(|e| Error::Config { path: e.path().to_string(), msg: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        for (name, st, stage) in [
            ("lm_pretrain", &self.lm_pretrain, Stage::LmPretrain),
            ("stage1", &self.stage1, Stage::AsrPretrain),
            ("stage2", &self.stage2, Stage::JointDst),
            ("final_ft", &self.final_ft, Stage::FinalFt),
        ] {
            st.validate().map_err(|e| match e {
                Error::Config { path, msg } => Error::Config { path: format!("{name}.{path}"), msg },
                other => other,
            })?;
            if st.stage != stage {
                return Err(Error::Config { path: format!("{name}.stage"), msg: format!("must be {stage:?}") });
            }
        }
        if self.workers == 0 {
            return Err(Error::Config { path: "workers".into(), msg: "must be at least 1".into() });
        }
        if self.fuzzy_threshold > 100 {
            return Err(Error::Config { path: "fuzzy_threshold".into(), msg: "must be within 0..=100".into() });
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configs serialize")
    }

    /// sha256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_string(self).expect("configs serialize").as_bytes()))
    }

    /// Resolves a relative checkpoint path against `paths.checkpoint_root`, then the
    /// environment variable, then the working directory.
    pub fn checkpoint_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        if let Some(root) = &self.paths.checkpoint_root {
            return root.join(p);
        }
        match std::env::var_os(CHECKPOINT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => p.to_path_buf(),
        }
    }
}
