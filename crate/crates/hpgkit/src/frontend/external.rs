//! Import/export of typed trees as structured text documents.
//!
//! A document is a single JSON object: `{"node_type", "value", "span"?,
//! "children": [{"label", "node"}, ...]}`. Spans are optional so trees
//! produced by other frontends can omit them; see `docs/ast-format.md`.

use super::{AstChild, FrontendError, TypedAstNode};
use crate::asdl::AsdlGrammar;
use crate::diag::{has_errors, Span};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AstDocument {
    pub node_type: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ChildDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildDocument {
    pub label: String,
    pub node: AstDocument,
}

/// Convert a typed tree to its document form.
pub fn ast_to_document(ast: &TypedAstNode) -> AstDocument {
    AstDocument {
        node_type: ast.node_type.clone(),
        value: ast.value.clone(),
        span: ast.span,
        children: ast
            .children
            .iter()
            .map(|c| ChildDocument { label: c.label.clone(), node: ast_to_document(&c.node) })
            .collect(),
    }
}

/// Convert a document back into a typed tree.
pub fn document_to_ast(doc: &AstDocument) -> TypedAstNode {
    TypedAstNode {
        node_type: doc.node_type.clone(),
        value: doc.value.clone(),
        span: doc.span,
        children: doc
            .children
            .iter()
            .map(|c| AstChild { label: c.label.clone(), node: document_to_ast(&c.node) })
            .collect(),
    }
}

/// Serialize a typed tree to pretty-printed document text.
pub fn export_ast(ast: &TypedAstNode) -> String {
    let doc = ast_to_document(ast);
    serde_json::to_string_pretty(&doc).expect("AST documents always serialize")
}

/// Parse document text into a typed tree. When a grammar is supplied the
/// tree must validate cleanly; without one any well-formed document is
/// accepted.
pub fn ingest_external_ast(
    text: &str,
    grammar: Option<&AsdlGrammar>,
) -> Result<TypedAstNode, FrontendError> {
    let doc: AstDocument =
        serde_json::from_str(text).map_err(|e| FrontendError::Malformed(e.to_string()))?;
    let ast = document_to_ast(&doc);
    if let Some(grammar) = grammar {
        let diags = super::validate_against_grammar(&ast, grammar);
        if has_errors(&diags) {
            return Err(FrontendError::Validation(diags));
        }
    }
    Ok(ast)
}
