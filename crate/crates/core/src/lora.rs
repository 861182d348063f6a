//! Low-rank adapters: `y = xW + (alpha/r)·xAB` with `A ∈ R^{d_in×r}`, `B ∈ R^{r×d_out}`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_TARGETS: [&str; 4] = ["attn.q", "attn.k", "attn.v", "attn.o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Site names or suffixes (`attn.q` matches `layers.N.attn.q` in every layer).
    pub target_matrices: Vec<String>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            target_matrices: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            init_std: default_init_std(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Extra trainable scalars added to a `d_in×d_out` site.
    pub fn params_per_site(&self, d_in: usize, d_out: usize) -> usize {
        d_in * self.rank + self.rank * d_out
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::with_rank(16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteAdapter {
    pub a: usize,
    pub b: usize,
}

/// Adapter factors for a set of LM projection sites.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters<T> {
    config: LoraConfig,
    params: ParamSet<T>,
    sites: BTreeMap<String, SiteAdapter>,
    scale: T,
}

impl<T: Scalar> LoraAdapters<T> {
    /// Creates zero-effect adapters (`B = 0`) for every linear in `available` that a target
    /// of `config` selects.
    pub fn new<R: Rng>(config: &LoraConfig, available: &[&Linear], rng: &mut R) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config { path: "lora.rank".into(), msg: "rank must be at least 1".into() });
        }
        if !(config.alpha > 0.0) {
            return Err(Error::Config { path: "lora.alpha".into(), msg: "alpha must be positive".into() });
        }
        let mut selected: Vec<&Linear> = Vec::new();
        for target in &config.target_matrices {
            let hits: Vec<&Linear> = available.iter().copied().filter(|l| site_matches(&l.site, target)).collect();
            if hits.is_empty() {
                let mut valid: Vec<String> = available.iter().map(|l| l.site.clone()).collect();
                valid.sort();
                return Err(Error::UnknownLoraSite { site: target.clone(), valid });
            }
            for h in hits {
                if !selected.iter().any(|s| s.site == h.site) {
                    selected.push(h);
                }
            }
        }
        let mut params = ParamSet::new(ParamGroup::Lora);
        let mut sites = BTreeMap::new();
        for lin in selected {
            let dim = lin.d_in.min(lin.d_out);
            if config.rank > dim {
                return Err(Error::LoraRank { site: lin.site.clone(), rank: config.rank, dim });
            }
            let a = params.add(format!("{}.lora_a", lin.site), Matrix::randn(lin.d_in, config.rank, config.init_std, rng));
            let b = params.add(format!("{}.lora_b", lin.site), Matrix::zeros(config.rank, lin.d_out));
            sites.insert(lin.site.clone(), SiteAdapter { a, b });
        }
        Ok(Self { config: config.clone(), params, sites, scale: T::from_f64_lossy(config.scale()) })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn site(&self, name: &str) -> Option<SiteAdapter> {
        self.sites.get(name).copied()
    }

    pub fn site_names(&self) -> impl Iterator<Item = &str> {
        self.sites.keys().map(String::as_str)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    /// Dense update `(alpha/r)·AB` for one site.
    pub fn delta(&self, site: &str) -> Option<Matrix<T>> {
        let s = self.site(site)?;
        Some(self.params.get(s.a).matmul(self.params.get(s.b)).scale(self.scale))
    }
}

fn site_matches(site: &str, target: &str) -> bool {
    site == target || site.strip_suffix(target).is_some_and(|rest| rest.ends_with('.'))
}

/// `y = xW + (alpha/r)·(xA)B` for a single projection.
pub fn lora_site_forward<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>, alpha: f64, r: usize) -> Result<Matrix<T>> {
    if x.cols() != w.rows() || a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != r || b.rows() != r {
        return Err(Error::Shape(format!(
            "lora site: x {:?}, W {:?}, A {:?}, B {:?}, r {}",
            x.shape(),
            w.shape(),
            a.shape(),
            b.shape(),
            r
        )));
    }
    if r == 0 {
        return Err(Error::Shape("lora rank must be positive".into()));
    }
    let base = x.matmul(w);
    let delta = x.matmul(a).matmul(b).scale(T::from_f64_lossy(alpha / r as f64));
    Ok(base.add(&delta))
}
