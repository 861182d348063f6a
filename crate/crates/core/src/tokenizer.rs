use serde::{Deserialize, Serialize};

/// Byte-level tokenizer: ids `0..256` are raw bytes, followed by special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTokenizer {
    pub kind: TokenizerKind,
    pub vocab_size: usize,
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Byte,
}

impl Default for ByteTokenizer {
    fn default() -> Self {
        Self { kind: TokenizerKind::Byte, vocab_size: 259, bos: 256, eos: 257, pad: 258 }
    }
}

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Lossy decode; special tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= 256
    }
}
