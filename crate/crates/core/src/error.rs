use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty feature sequence")]
    EmptyFeatures,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("encoder not trainable")]
    NotTrainable,
    #[error("unknown LoRA target site `{site}`; valid sites: {}", valid.join(", "))]
    UnknownLoraSite { site: String, valid: Vec<String> },
    #[error("LoRA rank {rank} exceeds dimension {dim} of site `{site}`")]
    LoraRank { site: String, rank: usize, dim: usize },
    #[error("LoRA adapters already merged into the base weights")]
    AlreadyMerged,
    #[error("context overflow by {overflow} positions (prefix {prefix} + tokens {tokens} > max_context {max_context})")]
    ContextOverflow { overflow: usize, prefix: usize, tokens: usize, max_context: usize },
    #[error("invalid dialogue state: {0}")]
    InvalidState(String),
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("loss mask selects no positions")]
    AllMasked,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("schema error at line {line}, field `{path}`: {msg}")]
    Schema { line: usize, path: String, msg: String },
    #[error("turn {turn} of dialogue `{dialogue}` has no external transcript")]
    MissingTranscript { dialogue: String, turn: usize },
    #[error("misaligned evaluation input: {0}")]
    Misaligned(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
