//! Heterogeneous program graph toolkit.
//!
//! The crate turns source code into typed graphs and learns over them:
//!
//! 1. **[asdl]**: parse an ASDL grammar and derive the node/edge type registries.
//! 2. **[frontend]**: tokenize and parse MiniLang sources (or ingest external
//!    ASTs) into typed trees validated against the grammar.
//! 3. **[hpg]**: lower a typed tree into a heterogeneous program graph with
//!    crafted sibling/token edges, subtoken nodes, reverse edges and
//!    depth-first timestamps.
//! 4. **[numeric]**: a small reverse-mode autodiff tensor core with the exact
//!    set of operations the models need.
//! 5. **[hgt]**: a typed graph-transformer encoder with per-type projections,
//!    meta-relation attention priors and global attention pooling.
//! 6. **[heads]**: task heads — a pointer-equipped sequence decoder for name
//!    generation, an MLP classifier, and evaluation metrics.
//! 7. **[train]**: corpus generators, AdamW, and the training/eval loops.
//! 8. **[cli]**: the `hpgkit` command-line interface.

pub mod asdl;
pub mod cli;
pub mod diag;
pub mod frontend;
pub mod heads;
pub mod hgt;
pub mod hpg;
pub mod numeric;
pub mod selftest;
pub mod train;
pub mod util;

/// The MiniLang grammar bundled with the toolkit.
pub const MINILANG_GRAMMAR: &str = include_str!("../fixtures/minilang.asdl");

/// Sentinel value substituted for masked identifiers.
pub const MASK_SENTINEL: &str = "<MASK>";
