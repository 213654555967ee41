//! MiniLang frontend: tokenizer, parser, external-AST ingestion and
//! grammar validation of typed trees.

mod external;
mod lexer;
mod parser;

pub use external::{ast_to_document, document_to_ast, export_ast, ingest_external_ast, AstDocument};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse_source;

use crate::asdl::AsdlGrammar;
use crate::diag::{Diagnostic, Pos, Span};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("lex error at {pos}: {message}")]
    Lex { pos: Pos, message: String },
    #[error("syntax error at {pos}: found {found}, expected {}", expected.join(" | "))]
    Parse { pos: Pos, found: String, expected: Vec<String> },
    #[error("malformed AST document: {0}")]
    Malformed(String),
    #[error("AST fails grammar validation: {}", summarize(.0))]
    Validation(Vec<Diagnostic>),
}

fn summarize(diags: &[Diagnostic]) -> String {
    let errors: Vec<String> =
        diags.iter().filter(|d| d.is_error()).map(|d| d.to_string()).collect();
    errors.join("; ")
}

/// A node of a typed abstract syntax tree.
///
/// `node_type` names a grammar type; for composite nodes `value` names the
/// constructor (or the type itself for the anonymous product form), for
/// terminals it holds the token text. Children are `(field label, node)`
/// pairs in field-declaration order, sequence fields in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedAstNode {
    pub node_type: String,
    pub value: String,
    pub children: Vec<AstChild>,
    pub span: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstChild {
    pub label: String,
    pub node: TypedAstNode,
}

impl TypedAstNode {
    pub fn new(
        node_type: impl Into<String>,
        value: impl Into<String>,
        children: Vec<AstChild>,
        span: Option<Span>,
    ) -> Self {
        TypedAstNode { node_type: node_type.into(), value: value.into(), children, span }
    }

    pub fn leaf(node_type: impl Into<String>, value: impl Into<String>, span: Option<Span>) -> Self {
        Self::new(node_type, value, Vec::new(), span)
    }

    /// Total number of nodes in the tree.
    pub fn count_nodes(&self) -> usize {
        1 + self.children.iter().map(|c| c.node.count_nodes()).sum::<usize>()
    }

    /// Depth-first pre-order traversal, visiting the node itself first.
    pub fn walk<'a>(&'a self, visit: &mut impl FnMut(&'a TypedAstNode)) {
        visit(self);
        for child in &self.children {
            child.node.walk(visit);
        }
    }
}

/// Check a typed tree against a grammar, collecting diagnostics instead of
/// failing fast. An empty result means the tree conforms.
pub fn validate_against_grammar(node: &TypedAstNode, grammar: &AsdlGrammar) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    validate_node(node, grammar, &mut diags);
    diags
}

fn validate_node(node: &TypedAstNode, grammar: &AsdlGrammar, diags: &mut Vec<Diagnostic>) {
    if grammar.is_primitive(&node.node_type) {
        if !node.children.is_empty() {
            diags.push(Diagnostic::error(
                format!(
                    "terminal node of primitive type `{}` has {} children",
                    node.node_type,
                    node.children.len()
                ),
                node.span,
            ));
        }
        return;
    }
    if !grammar.is_composite(&node.node_type) {
        diags.push(Diagnostic::error(
            format!("unknown type `{}`", node.node_type),
            node.span,
        ));
        return;
    }
    let ctor = match grammar.constructor(&node.value) {
        Some((owner, ctor)) if owner == node.node_type => ctor,
        Some((owner, _)) => {
            diags.push(Diagnostic::error(
                format!(
                    "constructor `{}` belongs to type `{owner}`, not `{}`",
                    node.value, node.node_type
                ),
                node.span,
            ));
            return;
        }
        None => {
            diags.push(Diagnostic::error(
                format!("unknown constructor `{}` for type `{}`", node.value, node.node_type),
                node.span,
            ));
            return;
        }
    };

    // Children must appear grouped by field, in field-declaration order.
    let mut ix = 0usize;
    for field in &ctor.fields {
        let mut count = 0usize;
        while ix < node.children.len() && node.children[ix].label == field.label {
            let child = &node.children[ix].node;
            check_child_type(child, field, &node.value, grammar, diags);
            validate_node(child, grammar, diags);
            ix += 1;
            count += 1;
        }
        if !field.qualifier.admits(count) {
            let kind = match field.qualifier {
                crate::asdl::Qualifier::Single => "Single",
                crate::asdl::Qualifier::Optional => "Optional",
                crate::asdl::Qualifier::Sequence => "Sequence",
            };
            if count == 0 && field.qualifier == crate::asdl::Qualifier::Single {
                diags.push(Diagnostic::error(
                    format!("missing Single field `{}` of constructor `{}`", field.label, node.value),
                    node.span,
                ));
            } else {
                diags.push(Diagnostic::error(
                    format!(
                        "field `{}` of constructor `{}` admits {kind} multiplicity but has {count} children",
                        field.label, node.value
                    ),
                    node.span,
                ));
            }
        }
    }
    for extra in &node.children[ix.min(node.children.len())..] {
        diags.push(Diagnostic::error(
            format!(
                "child labeled `{}` of constructor `{}` is unknown or out of declaration order",
                extra.label, node.value
            ),
            extra.node.span.or(node.span),
        ));
        // Still descend so nested problems surface too.
        validate_node(&extra.node, grammar, diags);
    }
}

fn check_child_type(
    child: &TypedAstNode,
    field: &crate::asdl::Field,
    ctor_name: &str,
    grammar: &AsdlGrammar,
    diags: &mut Vec<Diagnostic>,
) {
    if grammar.is_composite(&field.type_name) {
        if child.node_type != field.type_name {
            diags.push(Diagnostic::error(
                format!(
                    "field `{}` of constructor `{ctor_name}` expects type `{}`, found `{}`",
                    field.label, field.type_name, child.node_type
                ),
                child.span,
            ));
        }
    } else {
        // Primitive field positions accept any primitive terminal; this lets
        // the generic `constant` field type carry int/string terminals.
        if !grammar.is_primitive(&child.node_type) {
            diags.push(Diagnostic::error(
                format!(
                    "field `{}` of constructor `{ctor_name}` expects a terminal, found composite `{}`",
                    field.label, child.node_type
                ),
                child.span,
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl;
    use crate::MINILANG_GRAMMAR;

    fn grammar() -> AsdlGrammar {
        asdl::parse(MINILANG_GRAMMAR).unwrap()
    }

    #[test]
    fn valid_fixture_tree_has_no_diagnostics() {
        let g = grammar();
        let source = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/fib.mini"
        ))
        .unwrap();
        let ast = parse_source(&source, &g).unwrap();
        assert!(validate_against_grammar(&ast, &g).is_empty());
    }

    #[test]
    fn missing_single_field_is_reported() {
        let g = grammar();
        // An If node lacking its `test` child.
        let node = TypedAstNode::new(
            "stmt",
            "If",
            vec![AstChild {
                label: "body".into(),
                node: TypedAstNode::new(
                    "stmt",
                    "Return",
                    vec![],
                    None,
                ),
            }],
            None,
        );
        let diags = validate_against_grammar(&node, &g);
        assert!(diags.iter().any(|d| d.message.contains("missing Single field `test`")), "{diags:?}");
    }

    #[test]
    fn terminal_with_children_is_reported() {
        let g = grammar();
        let node = TypedAstNode::new(
            "identifier",
            "x",
            vec![AstChild {
                label: "id".into(),
                node: TypedAstNode::leaf("identifier", "y", None),
            }],
            None,
        );
        let diags = validate_against_grammar(&node, &g);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("terminal node"));
    }

    #[test]
    fn out_of_order_children_are_reported() {
        let g = grammar();
        let node = TypedAstNode::new(
            "expr",
            "BinOp",
            vec![
                AstChild {
                    label: "right".into(),
                    node: TypedAstNode::new(
                        "expr",
                        "Name",
                        vec![AstChild {
                            label: "id".into(),
                            node: TypedAstNode::leaf("identifier", "a", None),
                        }],
                        None,
                    ),
                },
                AstChild {
                    label: "op".into(),
                    node: TypedAstNode::new("operator", "Add", vec![], None),
                },
                AstChild {
                    label: "left".into(),
                    node: TypedAstNode::new(
                        "expr",
                        "Name",
                        vec![AstChild {
                            label: "id".into(),
                            node: TypedAstNode::leaf("identifier", "b", None),
                        }],
                        None,
                    ),
                },
            ],
            None,
        );
        let diags = validate_against_grammar(&node, &g);
        assert!(diags.iter().any(|d| d.message.contains("out of declaration order")), "{diags:?}");
    }

    #[test]
    fn unknown_type_is_reported() {
        let g = grammar();
        let node = TypedAstNode::leaf("ghost", "x", None);
        let diags = validate_against_grammar(&node, &g);
        assert!(diags[0].message.contains("unknown type `ghost`"));
    }

    #[test]
    fn constant_field_accepts_int_and_string_terminals() {
        let g = grammar();
        for (ty, val) in [("int", "42"), ("string", "hello"), ("constant", "none")] {
            let node = TypedAstNode::new(
                "expr",
                "Constant",
                vec![AstChild { label: "value".into(), node: TypedAstNode::leaf(ty, val, None) }],
                None,
            );
            assert!(validate_against_grammar(&node, &g).is_empty(), "{ty} rejected");
        }
    }
}
