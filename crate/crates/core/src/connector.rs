//! Frame-stacking connector: stacks `k` neighbouring encoder frames, projects them to the
//! connector width, runs a small bidirectional transformer, and projects the result into
//! the LM embedding space where it is consumed as a soft prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{window_forward, Graph, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorConfig {
    #[serde(default = "defaults::stack_factor")]
    pub stack_factor: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::ffn_dim")]
    pub ffn_dim: usize,
    pub encoder_dim: usize,
    pub lm_dim: usize,
    /// Longest stacked sequence the learned positional table covers.
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
}

mod defaults {
    pub fn stack_factor() -> usize {
        6
    }
    pub fn hidden() -> usize {
        1024
    }
    pub fn layers() -> usize {
        2
    }
    pub fn heads() -> usize {
        16
    }
    pub fn ffn_dim() -> usize {
        4096
    }
    pub fn max_positions() -> usize {
        512
    }
}

impl ConnectorConfig {
    /// Full-size defaults (6x stacking, 2 layers, 16 heads, width 1024, FFN 4096).
    pub fn new(encoder_dim: usize, lm_dim: usize) -> Self {
        Self {
            stack_factor: defaults::stack_factor(),
            hidden: defaults::hidden(),
            layers: defaults::layers(),
            heads: defaults::heads(),
            ffn_dim: defaults::ffn_dim(),
            encoder_dim,
            lm_dim,
            max_positions: defaults::max_positions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stack_factor", self.stack_factor),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_dim", self.encoder_dim),
            ("lm_dim", self.lm_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config { path: format!("connector.{name}"), msg: "must be positive".into() });
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config {
                path: "connector.hidden".into(),
                msg: format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            });
        }
        Ok(())
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stack_factor)
    }
}

/// Connector output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPromptSequence<T> {
    pub embeddings: Matrix<T>,
    pub source_length: usize,
}

impl<T: Scalar> SoftPromptSequence<T> {
    pub fn empty(lm_dim: usize) -> Self {
        Self { embeddings: Matrix::zeros(0, lm_dim), source_length: 0 }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

/// Concatenates each run of `k` consecutive frames into one row. Row `i` holds frames
/// `i*k .. i*k+k-1`; the last row is zero-padded when `T mod k != 0`.
pub fn stack_downsample<T: Scalar>(frames: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
    if frames.rows() == 0 {
        return Err(Error::EmptyFeatures);
    }
    if k == 0 {
        return Err(Error::Config { path: "stack_factor".into(), msg: "must be positive".into() });
    }
    if !frames.is_finite() {
        return Err(Error::NonFinite("feature sequence"));
    }
    Ok(window_forward(frames, k, k, 0, frames.rows().div_ceil(k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Connector<T> {
    cfg: ConnectorConfig,
    params: ParamSet<T>,
    input_proj: Linear,
    positions: usize,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNorm,
    output_proj: Linear,
}

impl<T: Scalar> Connector<T> {
    pub fn new<R: Rng>(cfg: ConnectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new(ParamGroup::Connector);
        let input_proj = Linear::new(&mut params, "input_proj", cfg.stack_factor * cfg.encoder_dim, cfg.hidden, 0.02, rng);
        let positions = params.add("positions", Matrix::randn(cfg.max_positions, cfg.hidden, 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&mut params, &format!("layers.{i}"), cfg.hidden, cfg.ffn_dim, cfg.heads, false, cfg.layers, rng))
            .collect();
        let ln_out = LayerNorm::new(&mut params, "ln_out", cfg.hidden);
        let output_proj = Linear::new(&mut params, "output_proj", cfg.hidden, cfg.lm_dim, 0.02, rng);
        Ok(Self { cfg, params, input_proj, positions, blocks, ln_out, output_proj })
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check(&self, t: usize, f: usize) -> Result<usize> {
        if t == 0 {
            return Err(Error::EmptyFeatures);
        }
        if f != self.cfg.encoder_dim {
            return Err(Error::Shape(format!("connector expects {} feature columns, got {f}", self.cfg.encoder_dim)));
        }
        let out = self.cfg.output_len(t);
        if out > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "{t} frames stack to {out} positions, beyond connector max_positions {}",
                self.cfg.max_positions
            )));
        }
        Ok(out)
    }

    /// Records the connector on `g`; `frames` must be a `T×encoder_dim` node.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, frames: Var) -> Result<Var> {
        let (t, f) = g.value(frames).shape();
        let out_len = self.check(t, f)?;
        let k = self.cfg.stack_factor;
        let stacked = g.window(frames, k, k, 0, out_len);
        let mut x = self.input_proj.forward(g, &self.params, None, stacked);
        let pos_table = self.params.leaf(g, self.positions);
        let pos = g.row_slice(pos_table, 0, out_len);
        x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, &self.params, None, x);
        }
        let x = self.ln_out.forward(g, &self.params, x);
        Ok(self.output_proj.forward(g, &self.params, None, x))
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, frames: &Matrix<T>) -> Result<SoftPromptSequence<T>> {
        let out_len = self.check(frames.rows(), frames.cols())?;
        let stacked = stack_downsample(frames, self.cfg.stack_factor)?;
        let mut x = self.input_proj.apply(&self.params, None, &stacked);
        x.add_assign(&self.params.get(self.positions).rows_slice(0, out_len));
        for block in &self.blocks {
            x = block.apply(&self.params, None, &x);
        }
        let x = self.ln_out.apply(&self.params, &x);
        Ok(SoftPromptSequence { embeddings: self.output_proj.apply(&self.params, None, &x), source_length: frames.rows() })
    }
}
