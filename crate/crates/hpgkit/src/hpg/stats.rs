//! Summary statistics for graphs and corpora.

use super::Hpg;
use indexmap::IndexMap;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub ast_node_count: usize,
    pub terminal_count: usize,
    pub subtoken_node_count: usize,
    pub node_type_histogram: IndexMap<String, usize>,
    pub edge_type_histogram: IndexMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub graph_count: usize,
    pub total_nodes: usize,
    pub total_edges: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub mean_terminals: f64,
    pub mean_subtoken_nodes: f64,
    pub node_type_histogram: IndexMap<String, usize>,
    pub edge_type_histogram: IndexMap<String, usize>,
}

pub fn graph_stats(graph: &Hpg) -> GraphStats {
    let reg = &graph.registries;
    let mut node_type_histogram: IndexMap<String, usize> =
        reg.node_types.iter().map(|t| (t.clone(), 0)).collect();
    let mut edge_type_histogram: IndexMap<String, usize> =
        reg.edge_types.iter().map(|t| (t.clone(), 0)).collect();
    let mut terminal_count = 0;
    for node in &graph.nodes {
        *node_type_histogram.entry(reg.node_name(node.type_id).to_string()).or_insert(0) += 1;
        if reg.is_primitive_node(node.type_id) {
            terminal_count += 1;
        }
    }
    for edge in &graph.edges {
        *edge_type_histogram.entry(reg.edge_name(edge.type_id).to_string()).or_insert(0) += 1;
    }
    GraphStats {
        node_count: graph.node_count(),
        edge_count: graph.edge_count(),
        ast_node_count: graph.ast_node_count,
        terminal_count,
        subtoken_node_count: graph.subtoken_node_count(),
        node_type_histogram,
        edge_type_histogram,
    }
}

pub fn corpus_stats(graphs: &[Hpg]) -> CorpusStats {
    let mut node_type_histogram: IndexMap<String, usize> = IndexMap::new();
    let mut edge_type_histogram: IndexMap<String, usize> = IndexMap::new();
    let mut total_nodes = 0;
    let mut total_edges = 0;
    let mut total_terminals = 0;
    let mut total_subtokens = 0;
    for graph in graphs {
        let s = graph_stats(graph);
        total_nodes += s.node_count;
        total_edges += s.edge_count;
        total_terminals += s.terminal_count;
        total_subtokens += s.subtoken_node_count;
        for (name, count) in s.node_type_histogram {
            *node_type_histogram.entry(name).or_insert(0) += count;
        }
        for (name, count) in s.edge_type_histogram {
            *edge_type_histogram.entry(name).or_insert(0) += count;
        }
    }
    let n = graphs.len();
    let mean = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    CorpusStats {
        graph_count: n,
        total_nodes,
        total_edges,
        mean_nodes: mean(total_nodes),
        mean_edges: mean(total_edges),
        mean_terminals: mean(total_terminals),
        mean_subtoken_nodes: mean(total_subtokens),
        node_type_histogram,
        edge_type_histogram,
    }
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
    fn empty_corpus_reports_zeros() {
        let s = corpus_stats(&[]);
        assert_eq!(s.graph_count, 0);
        assert_eq!(s.total_nodes, 0);
        assert_eq!(s.mean_nodes, 0.0);
        assert_eq!(s.mean_edges, 0.0);
        assert!(s.node_type_histogram.is_empty());
    }

    #[test]
    fn single_graph_stats_match_direct_counts() {
        let g = graph("x = foo(y)\n");
        let s = graph_stats(&g);
        assert_eq!(s.node_count, g.node_count());
        assert_eq!(s.edge_count, g.edge_count());
        assert_eq!(s.node_type_histogram.values().sum::<usize>(), g.node_count());
        assert_eq!(s.edge_type_histogram.values().sum::<usize>(), g.edge_count());
        // Terminals: x, foo, y.
        assert_eq!(s.terminal_count, 3);
        assert_eq!(s.subtoken_node_count, 3);
    }

    #[test]
    fn corpus_means_match_a_counting_oracle() {
        let sources = ["x = 1\n", "y = x + 1\n", "def f(a):\n    return a\n"];
        let graphs: Vec<Hpg> = sources.iter().map(|s| graph(s)).collect();
        let expected_nodes: usize = graphs.iter().map(|g| g.node_count()).sum();
        let expected_edges: usize = graphs.iter().map(|g| g.edge_count()).sum();
        let s = corpus_stats(&graphs);
        assert_eq!(s.graph_count, 3);
        assert_eq!(s.total_nodes, expected_nodes);
        assert_eq!(s.total_edges, expected_edges);
        assert!((s.mean_nodes - expected_nodes as f64 / 3.0).abs() < 1e-12);
        assert!((s.mean_edges - expected_edges as f64 / 3.0).abs() < 1e-12);
        // Reverse-edge invariant: totals are always even.
        assert_eq!(s.total_edges % 2, 0);
    }

    #[test]
    fn histograms_account_for_every_node_and_edge() {
        let g = graph("def f(a, b):\n    return a + b\n");
        let s = graph_stats(&g);
        let node_sum: usize = s.node_type_histogram.values().sum();
        let edge_sum: usize = s.edge_type_histogram.values().sum();
        assert_eq!(node_sum, s.node_count);
        assert_eq!(edge_sum, s.edge_count);
        assert_eq!(s.node_type_histogram["subtoken"], s.subtoken_node_count);
    }
}
