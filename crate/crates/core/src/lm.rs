//! Causal language model contract, soft-prompt prefix injection and LoRA adaptation.
//!
//! The toy model is a pre-norm causal transformer over byte tokens. Prefix embeddings
//! produced by the connector are concatenated in front of the token embeddings; logits are
//! returned for token positions only (row `i` predicts token `i+1`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, Var};
use crate::connector::SoftPromptSequence;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapters, LoraConfig};
use crate::nn::{KvCache, LayerNorm, Linear, TransformerBlock};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    pub ffn_dim: usize,
}

impl Default for LmSpec {
    fn default() -> Self {
        Self { vocab_size: 259, embed_dim: 128, layers: 4, heads: 4, max_context: 1024, ffn_dim: 512 }
    }
}

impl LmSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_context", self.max_context),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config { path: format!("lm.{name}"), msg: "must be positive".into() });
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config {
                path: "lm.embed_dim".into(),
                msg: format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm<T> {
    spec: LmSpec,
    params: ParamSet<T>,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl<T: Scalar> ToyLm<T> {
    pub fn new<R: Rng>(spec: LmSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new(ParamGroup::Lm);
        let tok_emb = params.add("tok_emb", Matrix::randn(spec.vocab_size, spec.embed_dim, 0.02, rng));
        let pos_emb = params.add("pos_emb", Matrix::randn(spec.max_context, spec.embed_dim, 0.02, rng));
        let blocks = (0..spec.layers)
            .map(|i| TransformerBlock::new(&mut params, &format!("layers.{i}"), spec.embed_dim, spec.ffn_dim, spec.heads, true, spec.layers, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut params, "ln_f", spec.embed_dim);
        let head = Linear::new(&mut params, "head", spec.embed_dim, spec.vocab_size, 0.02, rng);
        Ok(Self { spec, params, tok_emb, pos_emb, blocks, ln_f, head })
    }

    pub fn spec(&self) -> &LmSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Projection sites eligible for LoRA.
    pub fn linears(&self) -> Vec<&Linear> {
        self.blocks.iter().flat_map(|b| b.linears()).collect()
    }

    /// Token embedding rows (the soft prompt lives in the same space).
    pub fn embed_tokens(&self, ids: &[usize]) -> Matrix<T> {
        let table = self.params.get(self.tok_emb);
        let mut out = Matrix::zeros(ids.len(), self.spec.embed_dim);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        out
    }
}

/// A base LM with optional low-rank adapters on selected projection sites.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLm<T> {
    base: ToyLm<T>,
    lora: Option<LoraAdapters<T>>,
    merged: bool,
}

impl<T: Scalar> AdaptedLm<T> {
    /// Wraps an LM without adapters; base weights keep their trainability.
    pub fn plain(base: ToyLm<T>) -> Self {
        Self { base, lora: None, merged: false }
    }

    pub fn base(&self) -> &ToyLm<T> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut ToyLm<T> {
        &mut self.base
    }

    pub fn lora(&self) -> Option<&LoraAdapters<T>> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraAdapters<T>> {
        self.lora.as_mut()
    }

    /// Base and adapter parameters, borrowed together.
    pub fn param_sets_mut(&mut self) -> (&mut ParamSet<T>, Option<&mut ParamSet<T>>) {
        (&mut self.base.params, self.lora.as_mut().map(|l| l.params_mut()))
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn spec(&self) -> &LmSpec {
        &self.base.spec
    }

    pub fn remove_lora(&mut self) {
        self.lora = None;
    }

    /// Folds `(alpha/r)·AB` into every adapted weight and drops the adapters. A second call
    /// fails with [`Error::AlreadyMerged`].
    pub fn merge_in_place(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        if let Some(lora) = self.lora.take() {
            let sites: Vec<(String, usize)> = self.base.linears().iter().map(|l| (l.site.clone(), l.w)).collect();
            for (site, w) in sites {
                if let Some(delta) = lora.delta(&site) {
                    self.base.params.get_mut(w).add_assign(&delta);
                }
            }
        }
        self.merged = true;
        Ok(())
    }

    fn check_context(&self, prefix: usize, tokens: usize) -> Result<()> {
        let max_context = self.base.spec.max_context;
        if prefix + tokens > max_context {
            return Err(Error::ContextOverflow { overflow: prefix + tokens - max_context, prefix, tokens, max_context });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.base.spec.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", self.base.spec.vocab_size)));
        }
        Ok(())
    }

    /// Records `[prefix ‖ tokens]` on `g` and returns `L×vocab` logits for the token positions.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
        let p = prefix.map_or(0, |v| g.value(v).rows());
        if let Some(v) = prefix {
            if g.value(v).cols() != self.base.spec.embed_dim {
                return Err(Error::Shape(format!("prefix width {} != LM embed_dim {}", g.value(v).cols(), self.base.spec.embed_dim)));
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        self.check_ids(ids)?;
        self.check_context(p, ids.len())?;
        let base = &self.base;
        let set = &base.params;
        let lora = self.lora.as_ref();
        let table = set.leaf(g, base.tok_emb);
        let tok = g.gather(table, ids);
        let x = match prefix {
            Some(pv) if p > 0 => g.concat_rows(&[pv, tok]),
            _ => tok,
        };
        let pos_table = set.leaf(g, base.pos_emb);
        let pos = g.row_slice(pos_table, 0, p + ids.len());
        let mut x = g.add(x, pos);
        for block in &base.blocks {
            x = block.forward(g, set, lora, x);
        }
        let x = if p > 0 { g.row_slice(x, p, ids.len()) } else { x };
        let x = base.ln_f.forward(g, set, x);
        Ok(base.head.forward(g, set, None, x))
    }

    /// Inference-mode logits `[L × vocab]` over token positions.
    pub fn forward_with_prefix(&self, prefix: &SoftPromptSequence<T>, ids: &[usize]) -> Result<Matrix<T>> {
        let mut state = self.prefill(prefix, ids)?;
        Ok(state.take_logits())
    }

    fn input_rows(&self, start: usize, rows: Matrix<T>) -> Matrix<T> {
        let pos = self.base.params.get(self.base.pos_emb).rows_slice(start, rows.rows());
        rows.add(&pos)
    }

    fn run_blocks(&self, x: Matrix<T>, caches: &mut [KvCache<T>]) -> Matrix<T> {
        let mut x = x;
        for (block, cache) in self.base.blocks.iter().zip(caches.iter_mut()) {
            x = block.step(&self.base.params, self.lora.as_ref(), &x, cache);
        }
        x
    }

    fn project(&self, x: &Matrix<T>) -> Matrix<T> {
        let h = self.base.ln_f.apply(&self.base.params, x);
        self.base.head.apply(&self.base.params, None, &h)
    }

    /// Processes prefix and prompt in one causal pass and keeps the KV cache for decoding.
    pub fn prefill(&self, prefix: &SoftPromptSequence<T>, ids: &[usize]) -> Result<DecodeState<T>> {
        let p = prefix.len();
        if p > 0 && prefix.embeddings.cols() != self.base.spec.embed_dim {
            return Err(Error::Shape(format!("prefix width {} != LM embed_dim {}", prefix.embeddings.cols(), self.base.spec.embed_dim)));
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        self.check_ids(ids)?;
        self.check_context(p, ids.len())?;
        let mut rows = prefix.embeddings.clone();
        if p == 0 {
            rows = Matrix::zeros(0, self.base.spec.embed_dim);
        }
        rows.push_rows(&self.base.embed_tokens(ids));
        let x = self.input_rows(0, rows);
        let mut caches: Vec<KvCache<T>> = (0..self.base.blocks.len()).map(|_| KvCache::new(self.base.spec.embed_dim)).collect();
        let h = self.run_blocks(x, &mut caches);
        let logits = self.project(&h.rows_slice(p, ids.len()));
        Ok(DecodeState { caches, position: p + ids.len(), logits })
    }

    /// Feeds one token and returns its next-token logits row.
    pub fn step(&self, state: &mut DecodeState<T>, token: usize) -> Result<Matrix<T>> {
        self.check_ids(&[token])?;
        if state.position >= self.base.spec.max_context {
            return Err(Error::ContextOverflow {
                overflow: state.position + 1 - self.base.spec.max_context,
                prefix: 0,
                tokens: state.position + 1,
                max_context: self.base.spec.max_context,
            });
        }
        let x = self.input_rows(state.position, self.base.embed_tokens(&[token]));
        let h = self.run_blocks(x, &mut state.caches);
        state.position += 1;
        state.logits = self.project(&h);
        Ok(state.logits.clone())
    }

    /// Greedy decoding from `[prefix ‖ prompt]`.
    pub fn generate(&self, prefix: &SoftPromptSequence<T>, prompt: &[usize], stop: &StopCondition, max_new_tokens: usize) -> Result<Generation> {
        let mut out = Generation { tokens: Vec::new(), stop: StopReason::MaxTokens };
        if max_new_tokens == 0 {
            return Ok(out);
        }
        let mut state = self.prefill(prefix, prompt)?;
        let mut tracker = JsonCloseTracker::default();
        if stop.json_close {
            for &t in prompt {
                if t < 256 {
                    tracker.feed(t as u8);
                }
            }
        }
        let mut last = state.logits.rows() - 1;
        loop {
            let next = argmax(state.logits.row(last));
            if Some(next) == stop.eos {
                out.stop = StopReason::Eos;
                return Ok(out);
            }
            out.tokens.push(next);
            if stop.json_close && next < 256 && tracker.feed(next as u8) {
                out.stop = StopReason::JsonClosed;
                return Ok(out);
            }
            if out.tokens.len() >= max_new_tokens {
                return Ok(out);
            }
            if state.position >= self.base.spec.max_context {
                out.stop = StopReason::ContextFull;
                return Ok(out);
            }
            self.step(&mut state, next)?;
            last = 0;
        }
    }
}

/// Wraps a plain LM with fresh adapters. Base weights become frozen; only the adapter
/// factors are trainable among LM parameters.
pub fn inject_lora<T: Scalar, R: Rng>(lm: ToyLm<T>, cfg: &LoraConfig, rng: &mut R) -> Result<AdaptedLm<T>> {
    let adapters = LoraAdapters::new(cfg, &lm.linears(), rng)?;
    let mut base = lm;
    base.params.set_trainable(false);
    Ok(AdaptedLm { base, lora: Some(adapters), merged: false })
}

/// Returns the plain LM with `W' = W + (alpha/r)·AB` at every adapted site.
pub fn merge_lora<T: Scalar>(mut adapted: AdaptedLm<T>) -> Result<ToyLm<T>> {
    adapted.merge_in_place()?;
    Ok(adapted.base)
}

pub struct DecodeState<T> {
    caches: Vec<KvCache<T>>,
    position: usize,
    logits: Matrix<T>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn position(&self) -> usize {
        self.position
    }

    fn take_logits(&mut self) -> Matrix<T> {
        std::mem::replace(&mut self.logits, Matrix::zeros(0, 0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopCondition {
    pub eos: Option<usize>,
    /// Stop once the outermost JSON object (opened in the prompt or the output) closes.
    pub json_close: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    JsonClosed,
    Eos,
    MaxTokens,
    ContextFull,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub stop: StopReason,
}

impl Generation {
    pub fn truncated(&self) -> bool {
        matches!(self.stop, StopReason::MaxTokens | StopReason::ContextFull)
    }
}

/// Tracks brace depth outside JSON strings.
#[derive(Clone, Debug, Default)]
pub struct JsonCloseTracker {
    depth: usize,
    opened: bool,
    in_string: bool,
    escape: bool,
}

impl JsonCloseTracker {
    /// Returns true when this byte closes the outermost object.
    pub fn feed(&mut self, b: u8) -> bool {
        if self.in_string {
            if self.escape {
                self.escape = false;
            } else if b == b'\\' {
                self.escape = true;
            } else if b == b'"' {
                self.in_string = false;
            }
            return false;
        }
        match b {
            b'"' => self.in_string = true,
            b'{' => {
                self.depth += 1;
                self.opened = true;
            }
            b'}' if self.depth > 0 => {
                self.depth -= 1;
                return self.opened && self.depth == 0;
            }
            _ => {}
        }
        false
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
