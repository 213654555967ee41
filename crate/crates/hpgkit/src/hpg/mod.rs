//! Heterogeneous program graphs.
//!
//! A graph holds the typed AST nodes (ids in depth-first pre-order), crafted
//! `NextSib`/`NextToken` edges, optional subtoken nodes with `subtoken_of`
//! edges, one reverse edge per forward edge, and per-node timestamps.

mod build;
mod serialize;
mod stats;
mod transform;

pub use build::{build_graph, build_graph_with, registries_from_ast, BuildOptions};
pub use serialize::{canonical_serialize, parse_graph_dump};
pub use stats::{corpus_stats, graph_stats, CorpusStats, GraphStats};
pub use transform::{erase_types, mask_method_name};

use crate::asdl::TypeRegistries;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node type `{0}` relative to the registries")]
    UnknownNodeType(String),
    #[error("unknown field label `{0}` relative to the registries")]
    UnknownEdgeLabel(String),
    #[error("overlapping terminal spans: `{0}` and `{1}`")]
    OverlappingTerminals(String, String),
    #[error("expected exactly one top-level FunctionDef, found {0}")]
    FunctionDefCount(usize),
    #[error("malformed graph dump: {0}")]
    MalformedDump(String),
}

/// How identifiers are split into subtoken nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubtokenScheme {
    /// No subtoken nodes.
    None,
    /// One subtoken node per distinct part value per graph.
    #[default]
    Shared,
    /// One subtoken node per part occurrence.
    Independent,
}

impl SubtokenScheme {
    pub fn name(&self) -> &'static str {
        match self {
            SubtokenScheme::None => "none",
            SubtokenScheme::Shared => "shared",
            SubtokenScheme::Independent => "independent",
        }
    }
}

impl std::str::FromStr for SubtokenScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SubtokenScheme::None),
            "shared" => Ok(SubtokenScheme::Shared),
            "independent" => Ok(SubtokenScheme::Independent),
            other => Err(format!("unknown subtoken scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpgNode {
    pub type_id: usize,
    pub value: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HpgEdge {
    pub src: usize,
    pub dst: usize,
    pub type_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hpg {
    pub registries: TypeRegistries,
    /// Node id is the index into this vector.
    pub nodes: Vec<HpgNode>,
    pub edges: Vec<HpgEdge>,
    pub root: usize,
    /// Number of AST-derived nodes; subtoken nodes follow from this index on.
    pub ast_node_count: usize,
}

impl Hpg {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn subtoken_node_count(&self) -> usize {
        self.nodes.len() - self.ast_node_count
    }
}

/// Split an identifier into lowercase subtoken parts.
///
/// Boundaries: underscores, a lowercase letter followed by an uppercase one,
/// and letter/digit transitions. Empty parts are dropped.
pub fn split_subtokens(value: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut current = String::new();
    let mut prev: Option<char> = None;
    for ch in value.chars() {
        if ch == '_' {
            if !current.is_empty() {
                parts.push(std::mem::take(&mut current));
            }
            prev = None;
            continue;
        }
        if let Some(p) = prev {
            let lower_to_upper = p.is_lowercase() && ch.is_uppercase();
            let letter_digit = (p.is_alphabetic() && ch.is_ascii_digit())
                || (p.is_ascii_digit() && ch.is_alphabetic());
            if (lower_to_upper || letter_digit) && !current.is_empty() {
                parts.push(std::mem::take(&mut current));
            }
        }
        current.extend(ch.to_lowercase());
        prev = Some(ch);
    }
    if !current.is_empty() {
        parts.push(current);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitter_handles_snake_camel_and_digits() {
        assert_eq!(split_subtokens("train_model"), vec!["train", "model"]);
        assert_eq!(split_subtokens("getX"), vec!["get", "x"]);
        assert_eq!(split_subtokens("add2x"), vec!["add", "2", "x"]);
        assert_eq!(split_subtokens("parseHTTPResponse"), vec!["parse", "httpresponse"]);
        assert_eq!(split_subtokens("x"), vec!["x"]);
        assert_eq!(split_subtokens("__init__"), vec!["init"]);
        assert_eq!(split_subtokens("_"), Vec::<String>::new());
    }

    #[test]
    fn splitter_lowercases_all_parts() {
        for part in split_subtokens("MixedCase_NAME42x") {
            assert_eq!(part, part.to_lowercase());
        }
    }
}
