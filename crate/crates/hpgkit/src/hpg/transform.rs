//! Graph transformations: type erasure and method-name masking.

use super::{split_subtokens, GraphError, Hpg};
use crate::asdl::SUBTOKEN_OF;
use crate::frontend::TypedAstNode;
use crate::MASK_SENTINEL;
use std::collections::HashMap;

/// Sentinel type id used when node or edge types are erased.
pub const ERASED_TYPE_ID: usize = 0;

/// Collapse node and/or edge type ids to a single sentinel id. Values,
/// timestamps, structure, and the registries are untouched, so two graphs
/// that differ only in their type assignments erase to identical dumps.
pub fn erase_types(mut graph: Hpg, erase_nodes: bool, erase_edges: bool) -> Hpg {
    if erase_nodes {
        for node in &mut graph.nodes {
            node.type_id = ERASED_TYPE_ID;
        }
    }
    if erase_edges {
        for edge in &mut graph.edges {
            edge.type_id = ERASED_TYPE_ID;
        }
    }
    graph
}

/// Mask a single function's name throughout the graph.
///
/// The tree must contain exactly one top-level `FunctionDef`. Its name
/// terminal and every other terminal of the same type carrying the same value
/// (e.g. recursive call sites) are replaced by the sentinel value. A subtoken
/// node is masked only when *all* the terminals it belongs to are masked:
/// under the shared scheme a part like `count` in `get_count(count)` also
/// belongs to the parameter, and hiding it would erase the body evidence the
/// prediction is supposed to be recovered from. Returns the masked graph
/// together with the original name's subtoken sequence, which is the
/// prediction target.
pub fn mask_method_name(
    mut graph: Hpg,
    ast: &TypedAstNode,
) -> Result<(Hpg, Vec<String>), GraphError> {
    let function_defs: Vec<&TypedAstNode> = if ast.value == "FunctionDef" {
        vec![ast]
    } else {
        ast.children.iter().map(|c| &c.node).filter(|n| n.value == "FunctionDef").collect()
    };
    if function_defs.len() != 1 {
        return Err(GraphError::FunctionDefCount(function_defs.len()));
    }
    let name_node = function_defs[0]
        .children
        .iter()
        .find(|c| c.label == "name")
        .map(|c| &c.node)
        .ok_or(GraphError::FunctionDefCount(0))?;
    let name = name_node.value.clone();
    let name_type = graph
        .registries
        .node_id(&name_node.node_type)
        .ok_or_else(|| GraphError::UnknownNodeType(name_node.node_type.clone()))?;
    let target = split_subtokens(&name);

    let masked: Vec<usize> = (0..graph.ast_node_count)
        .filter(|&id| graph.nodes[id].type_id == name_type && graph.nodes[id].value == name)
        .collect();
    for &id in &masked {
        graph.nodes[id].value = MASK_SENTINEL.to_string();
    }
    if let Some(subtoken_of) = graph.registries.edge_id(SUBTOKEN_OF) {
        // owners[s] = (terminals of subtoken node s, how many are masked).
        let mut owners: HashMap<usize, (usize, usize)> = HashMap::new();
        for edge in graph.edges.iter().filter(|e| e.type_id == subtoken_of) {
            let entry = owners.entry(edge.src).or_insert((0, 0));
            entry.0 += 1;
            if masked.contains(&edge.dst) {
                entry.1 += 1;
            }
        }
        for (id, (total, hidden)) in owners {
            if total > 0 && total == hidden {
                graph.nodes[id].value = MASK_SENTINEL.to_string();
            }
        }
    }
    Ok((graph, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl;
    use crate::frontend::parse_source;
    use crate::hpg::{build_graph, canonical_serialize, SubtokenScheme};
    use crate::MINILANG_GRAMMAR;

    fn graph_and_ast(src: &str, scheme: SubtokenScheme) -> (Hpg, TypedAstNode) {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = parse_source(src, &grammar).unwrap();
        (build_graph(&ast, &registries, scheme).unwrap(), ast)
    }

    #[test]
    fn erasing_nothing_is_the_identity() {
        let (g, _) = graph_and_ast("x = 1\n", SubtokenScheme::Shared);
        let before = canonical_serialize(&g);
        let after = canonical_serialize(&erase_types(g, false, false));
        assert_eq!(before, after);
    }

    #[test]
    fn erasing_edges_only_preserves_node_types() {
        let (g, _) = graph_and_ast("x = foo(1)\n", SubtokenScheme::Shared);
        let node_types: Vec<usize> = g.nodes.iter().map(|n| n.type_id).collect();
        let erased = erase_types(g, false, true);
        assert_eq!(node_types, erased.nodes.iter().map(|n| n.type_id).collect::<Vec<_>>());
        assert!(erased.edges.iter().all(|e| e.type_id == ERASED_TYPE_ID));
        assert!(node_types.iter().any(|&t| t != ERASED_TYPE_ID));
    }

    #[test]
    fn erasing_both_collapses_every_type_but_nothing_else() {
        let (g, _) = graph_and_ast("def f(a):\n    return a\n", SubtokenScheme::Shared);
        let values: Vec<String> = g.nodes.iter().map(|n| n.value.clone()).collect();
        let stamps: Vec<u64> = g.nodes.iter().map(|n| n.timestamp).collect();
        let pairs: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        let erased = erase_types(g, true, true);
        assert!(erased.nodes.iter().all(|n| n.type_id == ERASED_TYPE_ID));
        assert!(erased.edges.iter().all(|e| e.type_id == ERASED_TYPE_ID));
        assert_eq!(values, erased.nodes.iter().map(|n| n.value.clone()).collect::<Vec<_>>());
        assert_eq!(stamps, erased.nodes.iter().map(|n| n.timestamp).collect::<Vec<_>>());
        assert_eq!(pairs, erased.edges.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>());
    }

    #[test]
    fn masking_replaces_the_name_and_returns_its_parts() {
        let (g, ast) = graph_and_ast("def add_two(x):\n    return x + 2\n", SubtokenScheme::Shared);
        let (masked, target) = mask_method_name(g, &ast).unwrap();
        assert_eq!(target, vec!["add", "two"]);
        let sentinel_values =
            masked.nodes.iter().filter(|n| n.value == MASK_SENTINEL).count();
        // The name terminal plus its two subtoken nodes.
        assert_eq!(sentinel_values, 3);
        assert!(!masked.nodes.iter().any(|n| n.value == "add_two"));
    }

    #[test]
    fn recursive_call_sites_are_masked_too() {
        let src = "def fib(n):\n    if n < 2:\n        return n\n    else:\n        return fib(n - 1)\n";
        let (g, ast) = graph_and_ast(src, SubtokenScheme::Shared);
        // Occurrence oracle: scan the unmasked tree portion for the name value
        // (the shared subtoken node carries it too, making three in total).
        let occurrences =
            g.nodes[..g.ast_node_count].iter().filter(|n| n.value == "fib").count();
        assert_eq!(occurrences, 2);
        assert_eq!(g.nodes.iter().filter(|n| n.value == "fib").count(), 3);
        let (masked, target) = mask_method_name(g, &ast).unwrap();
        assert_eq!(target, vec!["fib"]);
        assert_eq!(masked.nodes.iter().filter(|n| n.value == MASK_SENTINEL).count(), 3);
        assert!(!masked.nodes.iter().any(|n| n.value == "fib"));
    }

    #[test]
    fn non_function_input_is_an_error() {
        let (g, ast) = graph_and_ast("x = 1\n", SubtokenScheme::Shared);
        assert!(matches!(mask_method_name(g, &ast), Err(GraphError::FunctionDefCount(0))));
    }

    #[test]
    fn two_functions_are_an_error() {
        let src = "def f(a):\n    return a\ndef g(a):\n    return a\n";
        let (g, ast) = graph_and_ast(src, SubtokenScheme::Shared);
        assert!(matches!(mask_method_name(g, &ast), Err(GraphError::FunctionDefCount(2))));
    }

    #[test]
    fn masking_spares_subtokens_shared_with_the_body() {
        // `count` belongs to both the function name and the parameter; the
        // shared node must survive so the body still carries the evidence.
        let (g, ast) =
            graph_and_ast("def get_count(count):\n    return count\n", SubtokenScheme::Shared);
        let (masked, target) = mask_method_name(g, &ast).unwrap();
        assert_eq!(target, vec!["get", "count"]);
        let values: Vec<&str> =
            masked.nodes.iter().map(|n| n.value.as_str()).collect();
        assert!(values.contains(&"count"), "shared subtoken node must keep its value");
        // The name terminal and the name-only `get` part are hidden.
        assert_eq!(values.iter().filter(|v| **v == MASK_SENTINEL).count(), 2);
        assert!(!values.contains(&"get_count"));
    }

    #[test]
    fn independent_scheme_masks_only_the_names_own_parts() {
        let (g, ast) = graph_and_ast(
            "def get_count(count):\n    return count\n",
            SubtokenScheme::Independent,
        );
        let (masked, _) = mask_method_name(g, &ast).unwrap();
        // Name parts `get` + `count` plus the terminal itself are hidden;
        // each body occurrence of `count` keeps its own subtoken node.
        let sentinels =
            masked.nodes.iter().filter(|n| n.value == MASK_SENTINEL).count();
        assert_eq!(sentinels, 3);
        let live_count_subtokens = masked.nodes[masked.ast_node_count..]
            .iter()
            .filter(|n| n.value == "count")
            .count();
        assert_eq!(live_count_subtokens, 2);
    }

    #[test]
    fn masking_leaves_other_identifiers_alone() {
        let (g, ast) =
            graph_and_ast("def get(x):\n    return x\n", SubtokenScheme::Shared);
        let (masked, _) = mask_method_name(g, &ast).unwrap();
        let x_nodes = masked.nodes.iter().filter(|n| n.value == "x").count();
        // Two `x` identifier terminals plus one shared subtoken node.
        assert_eq!(x_nodes, 3);
    }
}
