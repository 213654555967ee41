//! Canonical graph dumps.
//!
//! The dump is deterministic: nodes appear in id order, edges are sorted by
//! `(src, dst, type)`, and the JSON is pretty-printed with a fixed key order,
//! so two structurally identical graphs serialize to identical bytes.

use super::{GraphError, Hpg, HpgEdge, HpgNode};
use crate::asdl::TypeRegistries;
use serde::{Deserialize, Serialize};

pub const GRAPH_DUMP_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GraphDump {
    version: u32,
    registry: TypeRegistries,
    root: usize,
    ast_node_count: usize,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(rename = "type")]
    type_id: usize,
    value: String,
    timestamp: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
struct EdgeRecord {
    src: usize,
    dst: usize,
    #[serde(rename = "type")]
    type_id: usize,
}

pub fn canonical_serialize(graph: &Hpg) -> String {
    let nodes: Vec<NodeRecord> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(id, n)| NodeRecord {
            id,
            type_id: n.type_id,
            value: n.value.clone(),
            timestamp: n.timestamp,
        })
        .collect();
    let mut edges: Vec<EdgeRecord> = graph
        .edges
        .iter()
        .map(|e| EdgeRecord { src: e.src, dst: e.dst, type_id: e.type_id })
        .collect();
    edges.sort();
    let dump = GraphDump {
        version: GRAPH_DUMP_VERSION,
        registry: graph.registries.clone(),
        root: graph.root,
        ast_node_count: graph.ast_node_count,
        nodes,
        edges,
    };
    let mut text = serde_json::to_string_pretty(&dump).expect("graph dump serializes");
    text.push('\n');
    text
}

pub fn parse_graph_dump(text: &str) -> Result<Hpg, GraphError> {
    let dump: GraphDump =
        serde_json::from_str(text).map_err(|e| GraphError::MalformedDump(e.to_string()))?;
    if dump.version != GRAPH_DUMP_VERSION {
        return Err(GraphError::MalformedDump(format!(
            "unsupported dump version {} (expected {GRAPH_DUMP_VERSION})",
            dump.version
        )));
    }
    let mut registries = dump.registry;
    registries.rebuild_index();
    let node_count = dump.nodes.len();
    let mut nodes: Vec<HpgNode> = Vec::with_capacity(node_count);
    for (ix, record) in dump.nodes.into_iter().enumerate() {
        if record.id != ix {
            return Err(GraphError::MalformedDump(format!(
                "node ids must be contiguous from 0; found {} at position {ix}",
                record.id
            )));
        }
        if record.type_id >= registries.node_types.len() {
            return Err(GraphError::MalformedDump(format!(
                "node {ix} has out-of-range type id {}",
                record.type_id
            )));
        }
        nodes.push(HpgNode {
            type_id: record.type_id,
            value: record.value,
            timestamp: record.timestamp,
        });
    }
    let mut edges: Vec<HpgEdge> = Vec::with_capacity(dump.edges.len());
    for record in dump.edges {
        if record.src >= node_count || record.dst >= node_count {
            return Err(GraphError::MalformedDump(format!(
                "edge ({}, {}) references a missing node",
                record.src, record.dst
            )));
        }
        if record.type_id >= registries.edge_types.len() {
            return Err(GraphError::MalformedDump(format!(
                "edge ({}, {}) has out-of-range type id {}",
                record.src, record.dst, record.type_id
            )));
        }
        edges.push(HpgEdge { src: record.src, dst: record.dst, type_id: record.type_id });
    }
    if dump.root >= node_count && node_count > 0 {
        return Err(GraphError::MalformedDump(format!("root {} is out of range", dump.root)));
    }
    if dump.ast_node_count > node_count {
        return Err(GraphError::MalformedDump(format!(
            "ast_node_count {} exceeds node count {node_count}",
            dump.ast_node_count
        )));
    }
    Ok(Hpg { registries, nodes, edges, root: dump.root, ast_node_count: dump.ast_node_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl;
    use crate::frontend::parse_source;
    use crate::hpg::{build_graph, SubtokenScheme};
    use crate::MINILANG_GRAMMAR;

    fn graph(src: &str) -> Hpg {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = parse_source(src, &grammar).unwrap();
        build_graph(&ast, &registries, SubtokenScheme::Shared).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let g = graph("def f(a):\n    return a + 1\n");
        let text = canonical_serialize(&g);
        let back = parse_graph_dump(&text).unwrap();
        assert_eq!(g.nodes, back.nodes);
        assert_eq!(g.root, back.root);
        assert_eq!(g.ast_node_count, back.ast_node_count);
        assert_eq!(g.registries.node_types, back.registries.node_types);
        assert_eq!(g.registries.edge_types, back.registries.edge_types);
        // Edge multisets match even though the dump is sorted.
        let mut a = g.edges.clone();
        let mut b = back.edges.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // And the round-tripped dump is byte-identical.
        assert_eq!(text, canonical_serialize(&back));
    }

    #[test]
    fn serialization_is_deterministic_across_builds() {
        let src = "x = foo(y, 2)\n";
        assert_eq!(canonical_serialize(&graph(src)), canonical_serialize(&graph(src)));
    }

    #[test]
    fn edges_are_emitted_in_sorted_order() {
        let g = graph("def f(a):\n    return a\n");
        let text = canonical_serialize(&g);
        let dump: serde_json::Value = serde_json::from_str(&text).unwrap();
        let edges = dump["edges"].as_array().unwrap();
        let keys: Vec<(u64, u64, u64)> = edges
            .iter()
            .map(|e| {
                (
                    e["src"].as_u64().unwrap(),
                    e["dst"].as_u64().unwrap(),
                    e["type"].as_u64().unwrap(),
                )
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        assert!(matches!(parse_graph_dump("not json"), Err(GraphError::MalformedDump(_))));
        let g = graph("x = 1\n");
        let mut text = canonical_serialize(&g);
        text = text.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(parse_graph_dump(&text), Err(GraphError::MalformedDump(_))));
    }

    #[test]
    fn gap_in_node_ids_is_rejected() {
        let g = graph("x = 1\n");
        let text = canonical_serialize(&g);
        let mut dump: serde_json::Value = serde_json::from_str(&text).unwrap();
        dump["nodes"][1]["id"] = serde_json::json!(7);
        let mangled = serde_json::to_string(&dump).unwrap();
        assert!(matches!(parse_graph_dump(&mangled), Err(GraphError::MalformedDump(_))));
    }
}
