//! The composed speech-to-DST model: encoder → connector → soft prefix → adapted LM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, Var};
use crate::connector::{Connector, ConnectorConfig, SoftPromptSequence};
use crate::encoder::{PrecomputedEncoder, SpeechEncoder, ToyEncoder, ToyEncoderConfig, UtteranceInput};
use crate::error::{Error, Result};
use crate::lm::{inject_lora, AdaptedLm, LmSpec, ToyLm};
use crate::lora::LoraConfig;
use crate::params::ParamSet;
use crate::prompting::PromptRecord;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Toy(ToyEncoderConfig),
    Precomputed { output_dim: usize },
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Toy(c) => c.dim,
            EncoderConfig::Precomputed { output_dim } => *output_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub lm: LmSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.connector.validate()?;
        if self.connector.encoder_dim != self.encoder.output_dim() {
            return Err(Error::Config {
                path: "connector.encoder_dim".into(),
                msg: format!("{} != encoder output dim {}", self.connector.encoder_dim, self.encoder.output_dim()),
            });
        }
        if self.connector.lm_dim != self.lm.embed_dim {
            return Err(Error::Config { path: "connector.lm_dim".into(), msg: format!("{} != lm.embed_dim {}", self.connector.lm_dim, self.lm.embed_dim) });
        }
        Ok(())
    }
}

/// One supervised sequence, optionally conditioned on an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Option<UtteranceInput>,
    pub record: PromptRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechDstModel<T> {
    pub encoder: SpeechEncoder<T>,
    pub connector: Connector<T>,
    pub lm: AdaptedLm<T>,
}

/// Seed offsets so the sub-modules draw from independent streams.
const ENCODER_STREAM: u64 = 1;
const CONNECTOR_STREAM: u64 = 2;
const LM_STREAM: u64 = 3;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

pub fn build_encoder<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<SpeechEncoder<T>> {
    Ok(match cfg {
        EncoderConfig::Toy(c) => SpeechEncoder::Toy(ToyEncoder::new(c.clone(), &mut stream(seed, ENCODER_STREAM))?),
        EncoderConfig::Precomputed { output_dim } => SpeechEncoder::Precomputed(PrecomputedEncoder { output_dim: *output_dim }),
    })
}

impl<T: Scalar> SpeechDstModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = build_encoder(&cfg.encoder, seed)?;
        let connector = Connector::new(cfg.connector.clone(), &mut stream(seed, CONNECTOR_STREAM))?;
        let lm = AdaptedLm::plain(ToyLm::new(cfg.lm.clone(), &mut stream(seed, LM_STREAM))?);
        Ok(Self { encoder, connector, lm })
    }

    /// Replaces encoder and connector with freshly initialised ones, keeping the LM.
    pub fn reinit_speech_side(&mut self, seed: u64) -> Result<()> {
        let enc_cfg = match &self.encoder {
            SpeechEncoder::Toy(e) => EncoderConfig::Toy(e.config().clone()),
            SpeechEncoder::Precomputed(p) => EncoderConfig::Precomputed { output_dim: p.output_dim },
        };
        self.encoder = build_encoder(&enc_cfg, seed)?;
        self.connector = Connector::new(self.connector.config().clone(), &mut stream(seed, CONNECTOR_STREAM))?;
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        let encoder = match &self.encoder {
            SpeechEncoder::Toy(e) => EncoderConfig::Toy(e.config().clone()),
            SpeechEncoder::Precomputed(p) => EncoderConfig::Precomputed { output_dim: p.output_dim },
        };
        ModelConfig { encoder, connector: self.connector.config().clone(), lm: self.lm.spec().clone() }
    }

    /// Adds fresh adapters and freezes the base LM. No-op if adapters already exist.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.lm.lora().is_some() {
            return Ok(());
        }
        self.lm = inject_lora(self.lm.base().clone(), cfg, &mut stream(seed, 4))?;
        Ok(())
    }

    pub fn soft_prefix(&self, input: &UtteranceInput) -> Result<SoftPromptSequence<T>> {
        self.connector.forward(&self.encoder.encode(input)?)
    }

    pub fn param_set(&self, group: ParamGroup) -> Option<&ParamSet<T>> {
        match group {
            ParamGroup::Encoder => self.encoder.params(),
            ParamGroup::Connector => Some(self.connector.params()),
            ParamGroup::Lm => Some(self.lm.base().params()),
            ParamGroup::Lora => self.lm.lora().map(|l| l.params()),
        }
    }

    pub fn param_set_mut(&mut self, group: ParamGroup) -> Option<&mut ParamSet<T>> {
        match group {
            ParamGroup::Encoder => self.encoder.params_mut(),
            ParamGroup::Connector => Some(self.connector.params_mut()),
            ParamGroup::Lm => Some(self.lm.base_mut().params_mut()),
            ParamGroup::Lora => self.lm.lora_mut().map(|l| l.params_mut()),
        }
    }

    /// Records the masked next-token loss of `ex` on `g`.
    pub fn loss_graph<'a>(&'a self, g: &mut Graph<'a, T>, ex: &Example) -> Result<Var> {
        let (inputs, targets, mask) = shifted(&ex.record)?;
        let prefix = match &ex.input {
            Some(input) => {
                let frames = self.encoder.encode_graph(g, input)?;
                Some(self.connector.forward_graph(g, frames)?)
            }
            None => None,
        };
        let logits = self.lm.forward_graph(g, prefix, inputs)?;
        Ok(g.cross_entropy(logits, targets, mask))
    }

    /// Masked mean negative log-likelihood of `ex` without recording gradients.
    pub fn nll(&self, ex: &Example) -> Result<f64> {
        let (inputs, targets, mask) = shifted(&ex.record)?;
        let prefix = match &ex.input {
            Some(input) => self.soft_prefix(input)?,
            None => SoftPromptSequence::empty(self.lm.spec().embed_dim),
        };
        let logits = self.lm.forward_with_prefix(&prefix, inputs)?;
        crate::training::compute_nll(&logits, targets, mask)
    }
}

/// `(inputs, targets, mask)` for teacher forcing: position `i` predicts token `i+1`.
fn shifted(rec: &PromptRecord) -> Result<(&[usize], &[usize], &[bool])> {
    let n = rec.token_ids.len();
    if n < 2 {
        return Err(Error::EmptyInput("prompt record"));
    }
    if rec.loss_mask.len() != n {
        return Err(Error::Shape(format!("loss mask has {} entries for {n} tokens", rec.loss_mask.len())));
    }
    let mask = &rec.loss_mask[1..];
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    Ok((&rec.token_ids[..n - 1], &rec.token_ids[1..], mask))
}
