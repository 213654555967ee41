//! Optimizer, synthetic corpus generators, and the training/evaluation loops
//! for both tasks.
//!
//! Everything here is deterministic given (seed, config, corpus): RNG streams
//! are derived per purpose and step, batching order comes from a seeded
//! shuffle, and evaluation always runs one graph at a time so a metric never
//! depends on how examples happened to be batched together.

mod corpus;
mod optim;
mod run;

pub use corpus::{
    gen_classification_corpus, gen_naming_corpus, gen_operand_order_corpus, Corpus, Example,
    Split, NAMING_TEMPLATE_WORDS,
};
pub use optim::{clip_global_norm, collect_gradients, AdamW};
pub use run::{
    evaluate_classification, evaluate_naming, metrics_jsonl, prepare_examples,
    train_classification, train_naming, value_vocab, ClassifyBundle, ClassifyOutcome, EvalReport,
    MetricRecord, NamingBundle, NamingOutcome, PredictionRecord, PreparedExample, Task,
};

use crate::asdl::AsdlError;
use crate::frontend::FrontendError;
use crate::heads::HeadsError;
use crate::hgt::{HgtConfig, HgtError};
use crate::hpg::{GraphError, SubtokenScheme};
use crate::numeric::{CheckpointError, NumericError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Asdl(#[from] AsdlError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hgt(#[from] HgtError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which ingredients of the graph are removed before training. Flags compose
/// freely; each one strictly removes information.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    pub erase_node_types: bool,
    pub erase_edge_types: bool,
    pub no_next_sib: bool,
    pub no_next_token: bool,
    pub decode_all_nodes: bool,
    pub no_copy: bool,
}

/// Decoder shape without the parts only known at training time (the width is
/// tied to the encoder and the vocabulary comes from the corpus).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderShape {
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for DecoderShape {
    fn default() -> Self {
        DecoderShape { layers: 2, heads: 4, ffn_width: 256, max_len: 8, dropout: 0.1 }
    }
}

/// Full training configuration. Deserializes from partial documents — every
/// missing field takes its desk-scale default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between validation passes; 0 means validate at epoch ends only.
    pub eval_interval: usize,
    pub encoder: HgtConfig,
    pub decoder: DecoderShape,
    pub classifier_hidden: Vec<usize>,
    /// Decoder vocabulary keeps target subtokens seen at least this many
    /// times in the training split; rarer ones must be copied.
    pub decoder_vocab_min_count: usize,
    pub scheme: SubtokenScheme,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            eval_interval: 0,
            encoder: HgtConfig {
                layers: 2,
                heads: 4,
                d_model: 64,
                ffn_width: 256,
                dropout: 0.1,
                vocab_size: 0,
            },
            decoder: DecoderShape::default(),
            classifier_hidden: vec![64],
            decoder_vocab_min_count: 3,
            scheme: SubtokenScheme::Shared,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale_and_valid() {
        let config = TrainConfig::default();
        config.validate().unwrap();
        assert_eq!(config.encoder.layers, 2);
        assert_eq!(config.encoder.heads, 4);
        assert_eq!(config.encoder.d_model, 64);
        assert!((config.lr - 1e-4).abs() < 1e-18);
        assert!((config.weight_decay - 0.01).abs() < 1e-18);
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let config: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.001, "epochs": 2, "ablation": {"no_copy": true}}"#)
                .unwrap();
        assert!((config.lr - 0.001).abs() < 1e-18);
        assert_eq!(config.epochs, 2);
        assert!(config.ablation.no_copy);
        assert!(!config.ablation.erase_node_types);
        assert_eq!(config.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut config = TrainConfig::default();
        config.lr = 0.0;
        assert!(config.validate().is_err());
        let mut config = TrainConfig::default();
        config.batch_size = 0;
        assert!(config.validate().is_err());
        let mut config = TrainConfig::default();
        config.epochs = 0;
        assert!(config.validate().is_err());
    }
}
