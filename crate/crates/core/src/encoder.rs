//! Speech encoder contract with a trainable toy encoder and a frozen file-backed encoder.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{window_forward, Graph, ParamGroup, Var};
use crate::data::read_feature_file;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{lit, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub output_dim: usize,
    /// Frames per second; informational only.
    pub frame_rate: f64,
}

/// What a user turn feeds into the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceInput {
    /// Synthetic symbol ids standing in for audio.
    Symbols(Vec<usize>),
    /// Path to a feature file (relative paths resolve against the corpus directory).
    FeatureFile(PathBuf),
    /// Inline `T×F` features, row-major.
    Features { rows: usize, cols: usize, data: Vec<f32> },
}

impl UtteranceInput {
    pub fn resolve(&self, base: Option<&Path>) -> UtteranceInput {
        match (self, base) {
            (UtteranceInput::FeatureFile(p), Some(base)) if p.is_relative() => UtteranceInput::FeatureFile(base.join(p)),
            _ => self.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub n_symbols: usize,
    pub dim: usize,
    /// Frames emitted per input symbol.
    pub expansion: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self { n_symbols: 64, dim: 32, expansion: 4, jitter: 0.1, seed: 0 }
    }
}

/// Symbol embedding, `expansion`-fold upsampling with deterministic sinusoidal jitter, and
/// a residual width-3 convolutional mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder<T> {
    cfg: ToyEncoderConfig,
    params: ParamSet<T>,
    embed: usize,
    mix_w: usize,
    mix_b: usize,
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new<R: Rng>(cfg: ToyEncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.n_symbols == 0 || cfg.dim == 0 || cfg.expansion == 0 {
            return Err(Error::Config { path: "encoder".into(), msg: "n_symbols, dim and expansion must be positive".into() });
        }
        let mut params = ParamSet::new(ParamGroup::Encoder);
        let embed = params.add("embed", Matrix::randn(cfg.n_symbols, cfg.dim, 1.0, rng));
        let mix_w = params.add("mix.weight", Matrix::randn(3 * cfg.dim, cfg.dim, 0.5 / (3.0 * cfg.dim as f64).sqrt(), rng));
        let mix_b = params.add("mix.bias", Matrix::zeros(1, cfg.dim));
        let mut jrng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let freqs = (0..cfg.dim).map(|_| jrng.gen_range(0.2..2.0)).collect();
        let phases = (0..cfg.dim).map(|_| jrng.gen_range(0.0..std::f64::consts::TAU)).collect();
        Ok(Self { cfg, params, embed, mix_w, mix_b, freqs, phases })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn expand(&self, symbols: &[usize]) -> Result<(Vec<usize>, Matrix<T>)> {
        if symbols.is_empty() {
            return Err(Error::EmptyInput("symbol sequence"));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= self.cfg.n_symbols) {
            return Err(Error::Shape(format!("symbol {bad} outside encoder vocabulary of {}", self.cfg.n_symbols)));
        }
        let ids: Vec<usize> = symbols.iter().flat_map(|&s| std::iter::repeat(s).take(self.cfg.expansion)).collect();
        let jitter = Matrix::from_fn(ids.len(), self.cfg.dim, |f, c| {
            lit(self.cfg.jitter * (f as f64 * self.freqs[c] + self.phases[c]).sin())
        });
        Ok((ids, jitter))
    }

    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a, T>, symbols: &[usize]) -> Result<Var> {
        let (ids, jitter) = self.expand(symbols)?;
        let table = self.params.leaf(g, self.embed);
        let e = g.gather(table, &ids);
        let j = g.constant(jitter);
        let h = g.add(e, j);
        let win = g.window(h, 3, 1, -1, ids.len());
        let w = self.params.leaf(g, self.mix_w);
        let b = self.params.leaf(g, self.mix_b);
        let m = g.matmul(win, w);
        let m = g.add_bias(m, b);
        let m = g.tanh(m);
        Ok(g.add(h, m))
    }

    pub fn encode(&self, symbols: &[usize]) -> Result<Matrix<T>> {
        let (ids, jitter) = self.expand(symbols)?;
        let table = self.params.get(self.embed);
        let mut h = Matrix::zeros(ids.len(), self.cfg.dim);
        for (r, &id) in ids.iter().enumerate() {
            h.row_mut(r).copy_from_slice(table.row(id));
        }
        let h = h.add(&jitter);
        let win = window_forward(&h, 3, 1, -1, ids.len());
        let mut m = win.matmul(self.params.get(self.mix_w));
        m.add_row(self.params.get(self.mix_b));
        Ok(h.add(&m.map(|v| v.tanh())))
    }
}

/// Frozen encoder replaying features computed offline by a pretrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEncoder {
    pub output_dim: usize,
}

impl PrecomputedEncoder {
    pub fn load<T: Scalar>(&self, input: &UtteranceInput) -> Result<Matrix<T>> {
        let m = match input {
            UtteranceInput::FeatureFile(path) => read_feature_file(path)?,
            UtteranceInput::Features { rows, cols, data } => {
                if rows * cols != data.len() {
                    return Err(Error::Shape(format!("inline features {rows}x{cols} hold {} values", data.len())));
                }
                Matrix::from_vec(*rows, *cols, data.clone())
            }
            UtteranceInput::Symbols(_) => {
                return Err(Error::Shape("precomputed encoder needs feature input, got symbols".into()));
            }
        };
        if m.rows() == 0 {
            return Err(Error::EmptyFeatures);
        }
        if m.cols() != self.output_dim {
            return Err(Error::Shape(format!("feature width {} != encoder output_dim {}", m.cols(), self.output_dim)));
        }
        Ok(Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|&v| lit(v as f64)).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpeechEncoder<T> {
    Toy(ToyEncoder<T>),
    Precomputed(PrecomputedEncoder),
}

impl<T: Scalar> SpeechEncoder<T> {
    pub fn spec(&self) -> EncoderSpec {
        match self {
            SpeechEncoder::Toy(e) => EncoderSpec { kind: EncoderKind::Toy, output_dim: e.cfg.dim, frame_rate: 50.0 },
            SpeechEncoder::Precomputed(p) => EncoderSpec { kind: EncoderKind::Precomputed, output_dim: p.output_dim, frame_rate: 50.0 },
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec().output_dim
    }

    /// Gradients reach encoder parameters iff `flag`; file-backed encoders are always frozen.
    pub fn set_trainable(&mut self, flag: bool) -> Result<()> {
        match self {
            SpeechEncoder::Toy(e) => {
                e.params.set_trainable(flag);
                Ok(())
            }
            SpeechEncoder::Precomputed(_) if flag => Err(Error::NotTrainable),
            SpeechEncoder::Precomputed(_) => Ok(()),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, SpeechEncoder::Toy(e) if e.params.is_trainable())
    }

    pub fn params(&self) -> Option<&ParamSet<T>> {
        match self {
            SpeechEncoder::Toy(e) => Some(&e.params),
            SpeechEncoder::Precomputed(_) => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet<T>> {
        match self {
            SpeechEncoder::Toy(e) => Some(&mut e.params),
            SpeechEncoder::Precomputed(_) => None,
        }
    }

    pub fn encode(&self, input: &UtteranceInput) -> Result<Matrix<T>> {
        match (self, input) {
            (SpeechEncoder::Toy(e), UtteranceInput::Symbols(s)) => e.encode(s),
            (SpeechEncoder::Toy(_), _) => Err(Error::Shape("toy encoder needs a symbol sequence".into())),
            (SpeechEncoder::Precomputed(p), other) => p.load(other),
        }
    }

    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a, T>, input: &UtteranceInput) -> Result<Var> {
        match (self, input) {
            (SpeechEncoder::Toy(e), UtteranceInput::Symbols(s)) if e.params.is_trainable() => e.encode_graph(g, s),
            // frozen encoders contribute constants only
            _ => Ok(g.constant(self.encode(input)?)),
        }
    }
}
