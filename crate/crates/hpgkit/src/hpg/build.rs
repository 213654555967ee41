//! Lowering typed trees into heterogeneous program graphs.
//!
//! Construction order: typed AST edges in depth-first discovery order, then
//! `NextSib` edges between adjacent children, then `NextToken` edges between
//! consecutive terminals, then subtoken nodes and `subtoken_of` edges, then
//! one reverse edge per forward edge (in forward order), then timestamps.

use super::{split_subtokens, GraphError, Hpg, HpgEdge, HpgNode, SubtokenScheme};
use crate::asdl::{TypeRegistries, NEXT_SIB, NEXT_TOKEN, SUBTOKEN_OF, SUBTOKEN_TYPE};
use crate::diag::Span;
use crate::frontend::TypedAstNode;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub scheme: SubtokenScheme,
    /// Emit `NextSib` edges (disabled by the crafted-edge ablation).
    pub next_sib: bool,
    /// Emit `NextToken` edges (disabled by the crafted-edge ablation).
    pub next_token: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { scheme: SubtokenScheme::Shared, next_sib: true, next_token: true }
    }
}

/// Build a graph with the default crafted edges enabled.
pub fn build_graph(
    ast: &TypedAstNode,
    registries: &TypeRegistries,
    scheme: SubtokenScheme,
) -> Result<Hpg, GraphError> {
    build_graph_with(ast, registries, &BuildOptions { scheme, ..BuildOptions::default() })
}

pub fn build_graph_with(
    ast: &TypedAstNode,
    registries: &TypeRegistries,
    options: &BuildOptions,
) -> Result<Hpg, GraphError> {
    let mut nodes: Vec<HpgNode> = Vec::new();
    let mut edges: Vec<HpgEdge> = Vec::new();
    let mut children_of: Vec<Vec<usize>> = Vec::new();
    let mut spans: Vec<Option<Span>> = Vec::new();

    // Pass 1: pre-order traversal assigns ids and records typed AST edges.
    flatten(ast, None, registries, &mut nodes, &mut edges, &mut children_of, &mut spans)?;
    let ast_node_count = nodes.len();

    // Pass 2: NextSib between adjacent children of each parent.
    if options.next_sib {
        let next_sib = registries
            .edge_id(NEXT_SIB)
            .ok_or_else(|| GraphError::UnknownEdgeLabel(NEXT_SIB.into()))?;
        for children in &children_of {
            for pair in children.windows(2) {
                edges.push(HpgEdge { src: pair[0], dst: pair[1], type_id: next_sib });
            }
        }
    }

    // Pass 3: NextToken between consecutive terminals in source order.
    if options.next_token {
        let next_token = registries
            .edge_id(NEXT_TOKEN)
            .ok_or_else(|| GraphError::UnknownEdgeLabel(NEXT_TOKEN.into()))?;
        let mut terminals: Vec<usize> = (0..nodes.len())
            .filter(|&id| registries.is_primitive_node(nodes[id].type_id))
            .collect();
        if terminals.iter().all(|&id| spans[id].is_some()) {
            terminals.sort_by_key(|&id| spans[id].unwrap().start);
            for pair in terminals.windows(2) {
                let a = spans[pair[0]].unwrap();
                let b = spans[pair[1]].unwrap();
                if b.start < a.end {
                    return Err(GraphError::OverlappingTerminals(
                        nodes[pair[0]].value.clone(),
                        nodes[pair[1]].value.clone(),
                    ));
                }
            }
        }
        // Without full span information the pre-order position stands in for
        // source order, which coincides with it for parser-produced trees.
        for pair in terminals.windows(2) {
            edges.push(HpgEdge { src: pair[0], dst: pair[1], type_id: next_token });
        }
    }

    // Pass 4: subtoken nodes and subtoken_of edges.
    if options.scheme != SubtokenScheme::None {
        let subtoken_of = registries
            .edge_id(SUBTOKEN_OF)
            .ok_or_else(|| GraphError::UnknownEdgeLabel(SUBTOKEN_OF.into()))?;
        let subtoken_type = registries.subtoken_node_id();
        let identifier_type = registries.node_id("identifier");
        let identifiers: Vec<usize> = (0..ast_node_count)
            .filter(|&id| Some(nodes[id].type_id) == identifier_type)
            .collect();
        let split: Vec<(usize, Vec<String>)> = identifiers
            .into_iter()
            .map(|id| (id, split_subtokens(&nodes[id].value)))
            .collect();
        let wmax = split.iter().map(|(_, parts)| parts.len()).max().unwrap_or(0) as u64;
        let mut shared: HashMap<String, usize> = HashMap::new();
        for (owner, parts) in split {
            for (j, part) in parts.into_iter().enumerate() {
                let timestamp = ast_node_count as u64 + owner as u64 * wmax + j as u64;
                let node_id = match options.scheme {
                    SubtokenScheme::Independent => {
                        nodes.push(HpgNode { type_id: subtoken_type, value: part, timestamp });
                        nodes.len() - 1
                    }
                    SubtokenScheme::Shared => *shared.entry(part.clone()).or_insert_with(|| {
                        nodes.push(HpgNode { type_id: subtoken_type, value: part, timestamp });
                        nodes.len() - 1
                    }),
                    SubtokenScheme::None => unreachable!(),
                };
                edges.push(HpgEdge { src: node_id, dst: owner, type_id: subtoken_of });
            }
        }
    }

    // Pass 5: one reverse edge per forward edge, in forward insertion order.
    let forward_len = edges.len();
    for ix in 0..forward_len {
        let e = edges[ix];
        edges.push(HpgEdge {
            src: e.dst,
            dst: e.src,
            type_id: registries.reverse_of(e.type_id),
        });
    }

    Ok(Hpg { registries: registries.clone(), nodes, edges, root: 0, ast_node_count })
}

fn flatten(
    ast: &TypedAstNode,
    parent_edge: Option<(usize, usize)>,
    registries: &TypeRegistries,
    nodes: &mut Vec<HpgNode>,
    edges: &mut Vec<HpgEdge>,
    children_of: &mut Vec<Vec<usize>>,
    spans: &mut Vec<Option<Span>>,
) -> Result<(), GraphError> {
    let type_id = registries
        .node_id(&ast.node_type)
        .ok_or_else(|| GraphError::UnknownNodeType(ast.node_type.clone()))?;
    let id = nodes.len();
    // Timestamps equal the pre-order index for AST nodes.
    nodes.push(HpgNode { type_id, value: ast.value.clone(), timestamp: id as u64 });
    children_of.push(Vec::new());
    spans.push(ast.span);
    if let Some((parent, edge_type)) = parent_edge {
        edges.push(HpgEdge { src: parent, dst: id, type_id: edge_type });
        children_of[parent].push(id);
    }
    for child in &ast.children {
        let edge_type = registries
            .edge_id(&child.label)
            .filter(|&e| registries.is_forward(e))
            .ok_or_else(|| GraphError::UnknownEdgeLabel(child.label.clone()))?;
        flatten(&child.node, Some((id, edge_type)), registries, nodes, edges, children_of, spans)?;
    }
    Ok(())
}

/// Derive registries from an arbitrary typed tree, for ingested documents
/// with no grammar. Types observed with children become composites; types
/// only ever seen childless are treated as primitive.
pub fn registries_from_ast(ast: &TypedAstNode) -> TypeRegistries {
    let mut type_order: Vec<String> = Vec::new();
    let mut has_children: HashMap<String, bool> = HashMap::new();
    let mut labels: Vec<String> = Vec::new();
    ast.walk(&mut |n| {
        if !type_order.contains(&n.node_type) {
            type_order.push(n.node_type.clone());
        }
        let entry = has_children.entry(n.node_type.clone()).or_insert(false);
        *entry = *entry || !n.children.is_empty();
        for c in &n.children {
            if !labels.contains(&c.label) {
                labels.push(c.label.clone());
            }
        }
    });
    let composites: Vec<String> =
        type_order.iter().filter(|t| has_children[*t]).cloned().collect();
    let composite_count = composites.len();
    let mut node_types = composites;
    node_types.extend(type_order.into_iter().filter(|t| !has_children[t] && t != SUBTOKEN_TYPE));
    node_types.push(SUBTOKEN_TYPE.to_string());
    labels.push(NEXT_SIB.to_string());
    labels.push(NEXT_TOKEN.to_string());
    labels.push(SUBTOKEN_OF.to_string());
    TypeRegistries::from_parts(node_types, composite_count, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl::{self, LAST_TOKEN};
    use crate::frontend::parse_source;
    use crate::MINILANG_GRAMMAR;

    fn setup(src: &str, scheme: SubtokenScheme) -> Hpg {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = parse_source(src, &grammar).unwrap();
        build_graph(&ast, &registries, scheme).unwrap()
    }

    #[test]
    fn a_minus_b_timestamps_follow_preorder() {
        let g = setup("a - b\n", SubtokenScheme::None);
        // Pre-order: Module, Expr, BinOp, Name, a, Sub, Name, b.
        let values: Vec<&str> = g.nodes.iter().map(|n| n.value.as_str()).collect();
        assert_eq!(values, vec!["Module", "Expr", "BinOp", "Name", "a", "Sub", "Name", "b"]);
        for (ix, n) in g.nodes.iter().enumerate() {
            assert_eq!(n.timestamp, ix as u64);
        }
        // BinOp sits at pre-order index 2; its operand subtree fans out as
        // Name(3), a(4), Sub(5), Name(6), b(7).
        assert_eq!(g.nodes[2].value, "BinOp");
        assert_eq!(g.nodes[4].value, "a");
        assert_eq!(g.nodes[7].value, "b");
    }

    #[test]
    fn every_forward_edge_has_exactly_one_reverse() {
        let g = setup("def f(a, b):\n    return a + b\n", SubtokenScheme::Shared);
        let reg = &g.registries;
        let forwards: Vec<&HpgEdge> =
            g.edges.iter().filter(|e| reg.is_forward(e.type_id)).collect();
        let reverses: Vec<&HpgEdge> =
            g.edges.iter().filter(|e| !reg.is_forward(e.type_id)).collect();
        assert_eq!(forwards.len(), reverses.len());
        for f in &forwards {
            let matched = reverses
                .iter()
                .filter(|r| {
                    r.src == f.dst && r.dst == f.src && r.type_id == reg.reverse_of(f.type_id)
                })
                .count();
            assert_eq!(matched, 1, "forward edge {f:?} lacks a unique reverse");
        }
    }

    #[test]
    fn next_token_chain_follows_source_order() {
        let g = setup("x = foo(y)\n", SubtokenScheme::None);
        let reg = &g.registries;
        let nt = reg.edge_id(NEXT_TOKEN).unwrap();
        let chain: Vec<(usize, usize)> = g
            .edges
            .iter()
            .filter(|e| e.type_id == nt)
            .map(|e| (e.src, e.dst))
            .collect();
        // Terminals in source order: x, foo, y.
        let values: Vec<&str> =
            chain.iter().map(|&(s, d)| [s, d]).flatten().map(|id| g.nodes[id].value.as_str()).collect();
        assert_eq!(values, vec!["x", "foo", "foo", "y"]);
        let lt = reg.edge_id(LAST_TOKEN).unwrap();
        assert_eq!(g.edges.iter().filter(|e| e.type_id == lt).count(), 2);
    }

    #[test]
    fn operator_nodes_are_not_part_of_the_token_chain() {
        let g = setup("a - b\n", SubtokenScheme::None);
        let nt = g.registries.edge_id(NEXT_TOKEN).unwrap();
        let token_edges: Vec<&HpgEdge> = g.edges.iter().filter(|e| e.type_id == nt).collect();
        assert_eq!(token_edges.len(), 1);
        assert_eq!(g.nodes[token_edges[0].src].value, "a");
        assert_eq!(g.nodes[token_edges[0].dst].value, "b");
    }

    #[test]
    fn fib_counts_match_hand_count_and_formula_oracle() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/fib.mini"))
            .unwrap();
        let ast = parse_source(&src, &grammar).unwrap();

        // Independent oracle: counts derived from the typed tree alone.
        let mut a = 0usize;
        let mut next_sib = 0usize;
        let mut terminals = 0usize;
        let mut identifier_parts = 0usize;
        let mut distinct_parts: Vec<String> = Vec::new();
        ast.walk(&mut |n| {
            a += 1;
            next_sib += n.children.len().saturating_sub(1);
            if grammar.is_primitive(&n.node_type) {
                terminals += 1;
                if n.node_type == "identifier" {
                    for p in split_subtokens(&n.value) {
                        identifier_parts += 1;
                        if !distinct_parts.contains(&p) {
                            distinct_parts.push(p);
                        }
                    }
                }
            }
        });
        // Frozen hand counts for fib.mini.
        assert_eq!(a, 36);
        assert_eq!(next_sib, 14);
        assert_eq!(terminals, 11);
        assert_eq!(identifier_parts, 8);
        assert_eq!(distinct_parts.len(), 2);

        let shared = build_graph(&ast, &registries, SubtokenScheme::Shared).unwrap();
        let forward = (a - 1) + next_sib + (terminals - 1) + identifier_parts;
        assert_eq!(shared.node_count(), a + distinct_parts.len());
        assert_eq!(shared.edge_count(), 2 * forward);

        let independent = build_graph(&ast, &registries, SubtokenScheme::Independent).unwrap();
        assert_eq!(independent.node_count(), a + identifier_parts);
        assert_eq!(independent.edge_count(), 2 * forward);

        let none = build_graph(&ast, &registries, SubtokenScheme::None).unwrap();
        assert_eq!(none.node_count(), a);
        assert_eq!(none.edge_count(), 2 * ((a - 1) + next_sib + (terminals - 1)));
    }

    #[test]
    fn subtoken_timestamps_use_owner_index_and_width() {
        let g = setup("total_sum = x\n", SubtokenScheme::Independent);
        let a = g.ast_node_count as u64;
        // Pre-order: Module(0) Assign(1) Name(2) total_sum(3) Name(4) x(5),
        // so the identifiers sit at ids 3 and 5 and Wmax = 2.
        assert_eq!(a, 6);
        let st: Vec<&HpgNode> = g.nodes[g.ast_node_count..].iter().collect();
        assert_eq!(st.len(), 3);
        assert_eq!(st[0].value, "total");
        assert_eq!(st[0].timestamp, a + 3 * 2);
        assert_eq!(st[1].value, "sum");
        assert_eq!(st[1].timestamp, a + 3 * 2 + 1);
        assert_eq!(st[2].value, "x");
        assert_eq!(st[2].timestamp, a + 5 * 2);
    }

    #[test]
    fn shared_scheme_keeps_first_occurrence_timestamp() {
        let g = setup("ab = ab + cd\n", SubtokenScheme::Shared);
        let (shared, independent) = (
            g.subtoken_node_count(),
            setup("ab = ab + cd\n", SubtokenScheme::Independent).subtoken_node_count(),
        );
        assert_eq!(shared, 2);
        assert_eq!(independent, 3);
        let ab = g.nodes[g.ast_node_count..].iter().find(|n| n.value == "ab").unwrap();
        // First `ab` occurrence is the Assign target's identifier, pre-order
        // id 3, and Wmax = 1.
        assert_eq!(ab.timestamp, g.ast_node_count as u64 + 3);
    }

    #[test]
    fn disabling_crafted_edges_removes_them() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = parse_source("x = a + b\n", &grammar).unwrap();
        let opts = BuildOptions { scheme: SubtokenScheme::None, next_sib: false, next_token: true };
        let g = build_graph_with(&ast, &registries, &opts).unwrap();
        let sib = registries.edge_id(NEXT_SIB).unwrap();
        assert_eq!(g.edges.iter().filter(|e| e.type_id == sib).count(), 0);
        let opts = BuildOptions { scheme: SubtokenScheme::None, next_sib: true, next_token: false };
        let g = build_graph_with(&ast, &registries, &opts).unwrap();
        let nt = registries.edge_id(NEXT_TOKEN).unwrap();
        assert_eq!(g.edges.iter().filter(|e| e.type_id == nt).count(), 0);
    }

    #[test]
    fn unknown_types_are_rejected_against_registries() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = TypedAstNode::leaf("ghost", "x", None);
        assert!(matches!(
            build_graph(&ast, &registries, SubtokenScheme::None),
            Err(GraphError::UnknownNodeType(_))
        ));
    }

    #[test]
    fn single_node_graph_has_no_edges() {
        let g = setup("", SubtokenScheme::Shared);
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.root, 0);
    }
}
