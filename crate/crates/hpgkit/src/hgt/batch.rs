//! Disjoint-union batching of graphs.

use super::Vocab;
use crate::hpg::Hpg;

/// Several graphs merged into one by offsetting node ids. Per-node segment
/// ids let pooling and per-graph decoding recover the originals.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub node_type_ids: Vec<usize>,
    pub value_ids: Vec<usize>,
    /// Original node value strings, kept for the copy mechanism.
    pub node_values: Vec<String>,
    pub timestamps: Vec<u64>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_type_ids: Vec<usize>,
    /// Graph segment id of each node.
    pub graph_of: Vec<usize>,
    pub graph_count: usize,
    /// Batch-global rows of each graph's nodes, in id order.
    pub node_rows: Vec<Vec<usize>>,
    /// Batch-global rows of each graph's subtoken nodes, in id order.
    /// Identified positionally (ids ≥ tree node count), so type erasure
    /// does not hide them.
    pub subtoken_rows: Vec<Vec<usize>>,
}

impl BatchGraph {
    pub fn new(graphs: &[&Hpg], vocab: &Vocab) -> Self {
        let total_nodes: usize = graphs.iter().map(|g| g.node_count()).sum();
        let total_edges: usize = graphs.iter().map(|g| g.edge_count()).sum();
        let mut batch = BatchGraph {
            node_type_ids: Vec::with_capacity(total_nodes),
            value_ids: Vec::with_capacity(total_nodes),
            node_values: Vec::with_capacity(total_nodes),
            timestamps: Vec::with_capacity(total_nodes),
            edge_src: Vec::with_capacity(total_edges),
            edge_dst: Vec::with_capacity(total_edges),
            edge_type_ids: Vec::with_capacity(total_edges),
            graph_of: Vec::with_capacity(total_nodes),
            graph_count: graphs.len(),
            node_rows: Vec::with_capacity(graphs.len()),
            subtoken_rows: Vec::with_capacity(graphs.len()),
        };
        let mut offset = 0;
        for (gix, graph) in graphs.iter().enumerate() {
            for node in &graph.nodes {
                batch.node_type_ids.push(node.type_id);
                batch.value_ids.push(vocab.id_or_unk(&node.value));
                batch.node_values.push(node.value.clone());
                batch.timestamps.push(node.timestamp);
                batch.graph_of.push(gix);
            }
            for edge in &graph.edges {
                batch.edge_src.push(offset + edge.src);
                batch.edge_dst.push(offset + edge.dst);
                batch.edge_type_ids.push(edge.type_id);
            }
            batch.node_rows.push((offset..offset + graph.node_count()).collect());
            batch
                .subtoken_rows
                .push((offset + graph.ast_node_count..offset + graph.node_count()).collect());
            offset += graph.node_count();
        }
        batch
    }

    pub fn node_count(&self) -> usize {
        self.node_type_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_src.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl;
    use crate::frontend::parse_source;
    use crate::hgt::UNK_TOKEN;
    use crate::hpg::{build_graph, SubtokenScheme};
    use crate::MINILANG_GRAMMAR;

    fn graph(src: &str) -> Hpg {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = asdl::build_registries(&grammar);
        let ast = parse_source(src, &grammar).unwrap();
        build_graph(&ast, &registries, SubtokenScheme::Shared).unwrap()
    }

    #[test]
    fn batching_offsets_ids_and_segments() {
        let a = graph("x = 1\n");
        let b = graph("y = foo(x)\n");
        let vocab = Vocab::new(&[UNK_TOKEN], a.nodes.iter().map(|n| n.value.clone()));
        let batch = BatchGraph::new(&[&a, &b], &vocab);
        assert_eq!(batch.node_count(), a.node_count() + b.node_count());
        assert_eq!(batch.edge_count(), a.edge_count() + b.edge_count());
        assert_eq!(batch.graph_count, 2);
        // Second graph's nodes are tagged segment 1 and offset by |a|.
        assert!(batch.graph_of[..a.node_count()].iter().all(|&g| g == 0));
        assert!(batch.graph_of[a.node_count()..].iter().all(|&g| g == 1));
        assert!(batch.edge_src[a.edge_count()..].iter().all(|&s| s >= a.node_count()));
        assert_eq!(batch.node_rows[1][0], a.node_count());
        // `foo` is unseen in the vocabulary and maps to the UNK row.
        let foo_row = batch.node_values.iter().position(|v| v == "foo").unwrap();
        assert_eq!(batch.value_ids[foo_row], 0);
    }

    #[test]
    fn subtoken_rows_survive_type_erasure() {
        let g = graph("total_sum = total\n");
        let erased = crate::hpg::erase_types(g.clone(), true, true);
        let vocab = Vocab::new(&[UNK_TOKEN], std::iter::empty::<String>());
        let plain = BatchGraph::new(&[&g], &vocab);
        let wiped = BatchGraph::new(&[&erased], &vocab);
        assert_eq!(plain.subtoken_rows, wiped.subtoken_rows);
        assert_eq!(plain.subtoken_rows[0].len(), g.subtoken_node_count());
        assert!(!plain.subtoken_rows[0].is_empty());
    }
}
