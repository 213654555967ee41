//! Typed graph-transformer encoder.
//!
//! Projection banks are indexed by node type, message/attention maps by edge
//! type, and a dense prior by the ⟨source type, edge type, target type⟩
//! triple, so the network treats differently-typed neighborhoods with
//! different parameters. Global attention pooling turns node states into one
//! vector per graph for classification heads.

mod batch;
mod encoder;

pub use batch::BatchGraph;
pub use encoder::{
    encode, encode_with_trace, global_attention_pool, init_encoder_params, init_features,
    init_pool_params, positional_encoding, EncodeTrace,
};

use crate::numeric::NumericError;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Vocabulary marker for values never seen in training.
pub const UNK_TOKEN: &str = "<UNK>";

#[derive(Debug, Error)]
pub enum HgtError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("{kind} id {id} out of range for a registry of {bound}")]
    UnknownType { kind: &'static str, id: usize, bound: usize },
    #[error("cannot pool an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Encoder hyperparameters. Defaults follow the reference configuration
/// (8 layers, 8 heads, width 256); training presets shrink them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HgtConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for HgtConfig {
    fn default() -> Self {
        HgtConfig { layers: 8, heads: 8, d_model: 256, ffn_width: 1024, dropout: 0.2, vocab_size: 0 }
    }
}

impl HgtConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), HgtError> {
        if self.heads == 0 || self.d_model == 0 {
            return Err(HgtError::BadConfig("heads and d_model must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(HgtError::BadConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HgtError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token table with a stable order and constant-time lookup. Serialized as
/// the plain token list; the reverse index is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from special markers followed by observed tokens, first
    /// occurrence wins; duplicates are dropped.
    pub fn new<I, S>(specials: &[&str], observed: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for tok in specials.iter().map(|s| s.to_string()).chain(observed.into_iter().map(Into::into))
        {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len());
                tokens.push(tok);
            }
        }
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Lookup falling back to the `<UNK>` row, which every encoder/decoder
    /// vocabulary is built with.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| {
            self.id(UNK_TOKEN)
                .unwrap_or_else(|| panic!("vocabulary built without {UNK_TOKEN}"))
        })
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_divisible_width() {
        let ok = HgtConfig { layers: 2, heads: 4, d_model: 64, ..HgtConfig::default() };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.head_dim(), 16);
        let bad = HgtConfig { heads: 3, d_model: 64, ..HgtConfig::default() };
        assert!(matches!(bad.validate(), Err(HgtError::BadConfig(_))));
    }

    #[test]
    fn vocab_dedups_and_falls_back_to_unk() {
        let v = Vocab::new(&[UNK_TOKEN], ["a", "b", "a", "c"].map(String::from));
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(1));
        assert_eq!(v.id_or_unk("zzz"), 0);
        assert_eq!(v.token(3), "c");
    }

    #[test]
    fn vocab_round_trips_through_serde() {
        let v = Vocab::new(&[UNK_TOKEN], ["x", "y"].map(String::from));
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(text, r#"["<UNK>","x","y"]"#);
        let back: Vocab = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), Some(2));
    }
}
