//! Layers shared by the connector and the toy language model.
//!
//! Each layer stores indices into the [`ParamSet`] of its owning module and offers two
//! entry points: `forward` records onto an autodiff [`Graph`], `apply` evaluates directly
//! on matrices for inference. Both follow the same arithmetic order.

use rand::Rng;

use crate::autodiff::{attention_forward, Graph, Var};
use crate::lora::LoraAdapters;
use crate::params::ParamSet;
use crate::scalar::{lit, Scalar};
use crate::tensor::{gelu, layer_norm, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub site: String,
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(set: &mut ParamSet<T>, site: &str, d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        let w = set.add(format!("{site}.weight"), Matrix::randn(d_in, d_out, std, rng));
        let b = set.add(format!("{site}.bias"), Matrix::zeros(1, d_out));
        Self { site: site.to_string(), w, b, d_in, d_out }
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        set: &'a ParamSet<T>,
        lora: Option<&'a LoraAdapters<T>>,
        x: Var,
    ) -> Var {
        let w = set.leaf(g, self.w);
        let b = set.leaf(g, self.b);
        let xw = g.matmul(x, w);
        let base = g.add_bias(xw, b);
        match lora.and_then(|l| l.site(&self.site).map(|s| (l, s))) {
            Some((l, site)) => {
                let a = l.params().leaf(g, site.a);
                let bb = l.params().leaf(g, site.b);
                let xa = g.matmul(x, a);
                let xab = g.matmul(xa, bb);
                let delta = g.scale(xab, l.scale());
                g.add(base, delta)
            }
            None => base,
        }
    }

    pub fn apply<T: Scalar>(&self, set: &ParamSet<T>, lora: Option<&LoraAdapters<T>>, x: &Matrix<T>) -> Matrix<T> {
        let mut base = x.matmul(set.get(self.w));
        base.add_row(set.get(self.b));
        match lora.and_then(|l| l.site(&self.site).map(|s| (l, s))) {
            Some((l, site)) => {
                let xab = x.matmul(l.params().get(site.a)).matmul(l.params().get(site.b));
                base.add(&xab.scale(l.scale()))
            }
            None => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        let gamma = set.add(format!("{name}.gamma"), Matrix::filled(1, d, T::one()));
        let beta = set.add(format!("{name}.beta"), Matrix::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, set: &'a ParamSet<T>, x: Var) -> Var {
        let gm = set.leaf(g, self.gamma);
        let bt = set.leaf(g, self.beta);
        g.layer_norm(x, gm, bt)
    }

    pub fn apply<T: Scalar>(&self, set: &ParamSet<T>, x: &Matrix<T>) -> Matrix<T> {
        layer_norm(x, set.get(self.gamma), set.get(self.beta), lit(1e-5)).0
    }
}

/// Cached keys and values of one attention layer.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(d: usize) -> Self {
        Self { k: Matrix::zeros(0, d), v: Matrix::zeros(0, d) }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        causal: bool,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        // residual projections scaled down with depth
        let out_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        Self {
            ln1: LayerNorm::new(set, &format!("{prefix}.ln1"), d),
            q: Linear::new(set, &format!("{prefix}.attn.q"), d, d, std, rng),
            k: Linear::new(set, &format!("{prefix}.attn.k"), d, d, std, rng),
            v: Linear::new(set, &format!("{prefix}.attn.v"), d, d, std, rng),
            o: Linear::new(set, &format!("{prefix}.attn.o"), d, d, out_std, rng),
            ln2: LayerNorm::new(set, &format!("{prefix}.ln2"), d),
            up: Linear::new(set, &format!("{prefix}.ffn.up"), d, ffn, std, rng),
            down: Linear::new(set, &format!("{prefix}.ffn.down"), ffn, d, out_std, rng),
            heads,
            causal,
        }
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        set: &'a ParamSet<T>,
        lora: Option<&'a LoraAdapters<T>>,
        x: Var,
    ) -> Var {
        let h = self.ln1.forward(g, set, x);
        let q = self.q.forward(g, set, lora, h);
        let k = self.k.forward(g, set, lora, h);
        let v = self.v.forward(g, set, lora, h);
        let a = g.attention(q, k, v, self.heads, self.causal);
        let o = self.o.forward(g, set, lora, a);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, set, x);
        let u = self.up.forward(g, set, lora, h);
        let u = g.gelu(u);
        let dn = self.down.forward(g, set, lora, u);
        g.add(x, dn)
    }

    /// Full-sequence evaluation without a cache.
    pub fn apply<T: Scalar>(&self, set: &ParamSet<T>, lora: Option<&LoraAdapters<T>>, x: &Matrix<T>) -> Matrix<T> {
        let h = self.ln1.apply(set, x);
        let q = self.q.apply(set, lora, &h);
        let k = self.k.apply(set, lora, &h);
        let v = self.v.apply(set, lora, &h);
        let a = attention_forward(&q, &k, &v, self.heads, self.causal).0;
        self.finish(set, lora, x, &a)
    }

    /// Incremental causal evaluation: `x` holds the next rows, whose keys and values are
    /// appended to `cache` before attending.
    pub fn step<T: Scalar>(&self, set: &ParamSet<T>, lora: Option<&LoraAdapters<T>>, x: &Matrix<T>, cache: &mut KvCache<T>) -> Matrix<T> {
        debug_assert!(self.causal);
        let h = self.ln1.apply(set, x);
        let q = self.q.apply(set, lora, &h);
        cache.k.push_rows(&self.k.apply(set, lora, &h));
        cache.v.push_rows(&self.v.apply(set, lora, &h));
        let a = attention_forward(&q, &cache.k, &cache.v, self.heads, true).0;
        self.finish(set, lora, x, &a)
    }

    fn finish<T: Scalar>(&self, set: &ParamSet<T>, lora: Option<&LoraAdapters<T>>, x: &Matrix<T>, a: &Matrix<T>) -> Matrix<T> {
        let x = x.add(&self.o.apply(set, lora, a));
        let h = self.ln2.apply(set, &x);
        let u = self.up.apply(set, lora, &h).map(gelu);
        x.add(&self.down.apply(set, lora, &u))
    }
}
