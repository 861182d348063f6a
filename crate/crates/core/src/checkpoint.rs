//! Checkpoint container: a directory holding `manifest.json` plus one parameter blob per
//! module.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{inject_lora, AdaptedLm};
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, SpeechDstModel};
use crate::params::{hex, ParamSet};
use crate::scalar::Scalar;
use crate::tokenizer::ByteTokenizer;
use crate::training::Stage;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "speechdst-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub step: usize,
    pub seed: u64,
    pub stage: Option<Stage>,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub merged: bool,
    pub tokenizer: ByteTokenizer,
    pub modules: Vec<ModuleEntry>,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    pub stage: Option<Stage>,
    pub run_config: Option<serde_json::Value>,
    pub config_hash: Option<String>,
}

fn sets<T: Scalar>(model: &SpeechDstModel<T>) -> Vec<(&'static str, &ParamSet<T>)> {
    let mut out = Vec::new();
    if let Some(e) = model.encoder.params() {
        out.push(("encoder", e));
    }
    out.push(("connector", model.connector.params()));
    out.push(("lm", model.lm.base().params()));
    if let Some(l) = model.lm.lora() {
        out.push(("lora", l.params()));
    }
    out
}

/// Writes the checkpoint to `dir`, replacing any previous content only once every file has
/// been written.
pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &SpeechDstModel<T>, meta: &CheckpointMeta) -> Result<Manifest> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    let mut modules = Vec::new();
    for (name, set) in sets(model) {
        let bytes = set.to_bytes();
        let file = format!("{name}.bin");
        std::fs::write(staging.join(&file), &bytes)?;
        modules.push(ModuleEntry { name: name.to_string(), file, sha256: hex(&Sha256::digest(&bytes)) });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        scalar: T::DTYPE.into(),
        step: meta.step,
        seed: meta.seed,
        stage: meta.stage,
        model: model.config(),
        lora: model.lm.lora().map(|l| l.config().clone()),
        merged: model.lm.is_merged(),
        tokenizer: ByteTokenizer::default(),
        modules,
        run_config: meta.run_config.clone(),
        config_hash: meta.config_hash.clone(),
    };
    std::fs::write(staging.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            std::fs::remove_dir_all(&old)?;
        }
        std::fs::rename(dir, &old)?;
        std::fs::rename(&staging, dir)?;
        std::fs::remove_dir_all(&old)?;
    } else {
        std::fs::rename(&staging, dir)?;
    }
    Ok(manifest)
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!("{name}.{suffix}"))
}

/// Accepts either the checkpoint directory or its manifest path.
pub fn read_manifest(path: &Path) -> Result<(PathBuf, Manifest)> {
    let (dir, file) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST)) } else { (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf()) };
    if !file.exists() {
        return Err(Error::Checkpoint(format!("no manifest at {}", file.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&file)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    Ok((dir, manifest))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SpeechDstModel<T>, Manifest)> {
    let (dir, manifest) = read_manifest(path)?;
    if manifest.scalar != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {} weights, requested {}", manifest.scalar, T::DTYPE)));
    }
    let mut model = SpeechDstModel::<T>::new(&manifest.model, manifest.seed)?;
    if let Some(cfg) = &manifest.lora {
        let base = model.lm.base().clone();
        model.lm = inject_lora(base, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    } else if manifest.merged {
        let mut lm = AdaptedLm::plain(model.lm.base().clone());
        lm.merge_in_place()?;
        model.lm = lm;
    }
    for entry in &manifest.modules {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        if hex(&Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for {}", entry.file)));
        }
        let set = match entry.name.as_str() {
            "encoder" => model.encoder.params_mut(),
            "connector" => Some(model.connector.params_mut()),
            "lm" => Some(model.lm.base_mut().params_mut()),
            "lora" => model.lm.lora_mut().map(|l| l.params_mut()),
            other => return Err(Error::Checkpoint(format!("unknown module `{other}`"))),
        };
        let set = set.ok_or_else(|| Error::Checkpoint(format!("module `{}` has no counterpart in the model", entry.name)))?;
        set.load_bytes(&bytes)?;
    }
    Ok((model, manifest))
}
