//! Feature initialization, typed attention layers, and pooling.

use super::{BatchGraph, HgtConfig, HgtError};
use crate::asdl::TypeRegistries;
use crate::numeric::{Graph, ParamBinding, ParamStore, Tensor, TensorId};
use rand_chacha::ChaCha20Rng;

/// Sinusoidal encoding of node timestamps: even columns carry
/// `sin(t / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_encoding(timestamps: &[u64], d_model: usize) -> Tensor {
    let n = timestamps.len();
    let mut out = Tensor::zeros(vec![n, d_model]);
    for (row, &t) in timestamps.iter().enumerate() {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            out.data[row * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn node_bank(
    binding: &ParamBinding,
    registries: &TypeRegistries,
    prefix: &str,
) -> Vec<TensorId> {
    registries
        .node_types
        .iter()
        .map(|name| binding.id(&format!("{prefix}.{name}")))
        .collect()
}

fn edge_bank(
    binding: &ParamBinding,
    registries: &TypeRegistries,
    prefix: &str,
) -> Vec<TensorId> {
    registries
        .edge_types
        .iter()
        .map(|name| binding.id(&format!("{prefix}.{name}")))
        .collect()
}

/// Create all encoder parameters: the value embedding, per-layer/per-head
/// projection banks per node type, per-edge-type message/attention maps
/// shared across heads, per-node-type combination maps, and the dense
/// meta-relation prior (initialized to 1).
pub fn init_encoder_params(
    config: &HgtConfig,
    registries: &TypeRegistries,
    rng: &mut ChaCha20Rng,
) -> Result<ParamStore, HgtError> {
    config.validate()?;
    if config.vocab_size == 0 {
        return Err(HgtError::BadConfig("vocab_size must be set before init".into()));
    }
    let d = config.d_model;
    let dh = config.head_dim();
    let a_count = registries.node_types.len();
    let r_count = registries.edge_types.len();
    let mut store = ParamStore::new();
    store.insert("embed.value", Tensor::normal(vec![config.vocab_size, d], 0.02, rng));
    for l in 0..config.layers {
        for i in 0..config.heads {
            for proj in ["m", "k", "q"] {
                for name in &registries.node_types {
                    store.insert(
                        format!("enc.l{l}.h{i}.{proj}.{name}"),
                        Tensor::xavier_uniform(d, dh, rng),
                    );
                }
            }
        }
        for name in &registries.edge_types {
            store.insert(format!("enc.l{l}.wm.{name}"), Tensor::xavier_uniform(dh, dh, rng));
        }
        for name in &registries.edge_types {
            store.insert(format!("enc.l{l}.wa.{name}"), Tensor::xavier_uniform(dh, dh, rng));
        }
        for name in &registries.node_types {
            store.insert(format!("enc.l{l}.c.{name}"), Tensor::xavier_uniform(d, d, rng));
        }
        store.insert(
            format!("enc.l{l}.mu"),
            Tensor::filled(vec![a_count, r_count, a_count, config.heads], 1.0),
        );
    }
    Ok(store)
}

/// Gated pooling parameters for whole-graph readout.
pub fn init_pool_params(config: &HgtConfig, rng: &mut ChaCha20Rng, store: &mut ParamStore) {
    let d = config.d_model;
    store.insert("pool.gate.w", Tensor::xavier_uniform(d, d, rng));
    store.insert("pool.gate.b", Tensor::zeros(vec![d]));
    store.insert("pool.value.w", Tensor::xavier_uniform(d, d, rng));
    store.insert("pool.value.b", Tensor::zeros(vec![d]));
}

/// Level-0 states: value embedding plus timestamp encoding.
pub fn init_features(
    graph: &mut Graph,
    binding: &ParamBinding,
    batch: &BatchGraph,
    config: &HgtConfig,
) -> Result<TensorId, HgtError> {
    let embed = binding.id("embed.value");
    let base = graph.gather_rows(embed, &batch.value_ids)?;
    let pe = graph.constant(positional_encoding(&batch.timestamps, config.d_model));
    Ok(graph.add(base, pe)?)
}

/// Attention weights recorded per layer and head, for inspection and the
/// normalization checks.
pub struct EncodeTrace {
    /// `attention[layer][head]` is the per-edge weight vector (aligned with
    /// the batch's edge arrays) after segment normalization.
    pub attention: Vec<Vec<TensorId>>,
}

pub fn encode(
    graph: &mut Graph,
    binding: &ParamBinding,
    batch: &BatchGraph,
    config: &HgtConfig,
    registries: &TypeRegistries,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<TensorId, HgtError> {
    encode_with_trace(graph, binding, batch, config, registries, train, rng).map(|(s, _)| s)
}

pub fn encode_with_trace(
    graph: &mut Graph,
    binding: &ParamBinding,
    batch: &BatchGraph,
    config: &HgtConfig,
    registries: &TypeRegistries,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(TensorId, EncodeTrace), HgtError> {
    config.validate()?;
    let a_count = registries.node_types.len();
    let r_count = registries.edge_types.len();
    if let Some(&bad) = batch.node_type_ids.iter().find(|&&t| t >= a_count) {
        return Err(HgtError::UnknownType { kind: "node type", id: bad, bound: a_count });
    }
    if let Some(&bad) = batch.edge_type_ids.iter().find(|&&t| t >= r_count) {
        return Err(HgtError::UnknownType { kind: "edge type", id: bad, bound: r_count });
    }
    let mut states = init_features(graph, binding, batch, config)?;
    let mut trace = EncodeTrace { attention: Vec::with_capacity(config.layers) };
    for l in 0..config.layers {
        let (next, alphas) =
            hgt_layer(graph, binding, batch, config, registries, l, states, train, rng)?;
        states = next;
        trace.attention.push(alphas);
    }
    Ok((states, trace))
}

/// One message-passing layer. Per head: typed key/query/message projections,
/// per-edge attention scores weighted by the meta-relation prior and
/// `1/sqrt(d_head)`, softmax over each target's incoming edges, and
/// attention-weighted message sums. Heads are concatenated, passed through
/// the target-typed combination map and the activation, and added to the
/// previous state. A node with no incoming edge aggregates nothing and keeps
/// its state unchanged (zero activation contributes zero).
#[allow(clippy::too_many_arguments)]
fn hgt_layer(
    graph: &mut Graph,
    binding: &ParamBinding,
    batch: &BatchGraph,
    config: &HgtConfig,
    registries: &TypeRegistries,
    layer: usize,
    states: TensorId,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<(TensorId, Vec<TensorId>), HgtError> {
    let n = batch.node_count();
    let a_count = registries.node_types.len();
    let r_count = registries.edge_types.len();
    let heads = config.heads;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mu = binding.id(&format!("enc.l{layer}.mu"));
    let wm_bank = edge_bank(binding, registries, &format!("enc.l{layer}.wm"));
    let wa_bank = edge_bank(binding, registries, &format!("enc.l{layer}.wa"));

    let mut head_aggs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for i in 0..heads {
        let m_bank = node_bank(binding, registries, &format!("enc.l{layer}.h{i}.m"));
        let k_bank = node_bank(binding, registries, &format!("enc.l{layer}.h{i}.k"));
        let q_bank = node_bank(binding, registries, &format!("enc.l{layer}.h{i}.q"));
        let keys = graph.typed_matmul(states, &k_bank, &batch.node_type_ids)?;
        let queries = graph.typed_matmul(states, &q_bank, &batch.node_type_ids)?;
        let messages = graph.typed_matmul(states, &m_bank, &batch.node_type_ids)?;

        let k_src = graph.gather_rows(keys, &batch.edge_src)?;
        let kw = graph.typed_matmul(k_src, &wa_bank, &batch.edge_type_ids)?;
        let q_dst = graph.gather_rows(queries, &batch.edge_dst)?;
        let raw = graph.row_dot(kw, q_dst)?;
        let mu_indices: Vec<usize> = (0..batch.edge_count())
            .map(|e| {
                let s_type = batch.node_type_ids[batch.edge_src[e]];
                let e_type = batch.edge_type_ids[e];
                let t_type = batch.node_type_ids[batch.edge_dst[e]];
                ((s_type * r_count + e_type) * a_count + t_type) * heads + i
            })
            .collect();
        let mu_e = graph.gather_scalars(mu, &mu_indices)?;
        let weighted_scores = graph.mul(raw, mu_e)?;
        let scaled = graph.scale(weighted_scores, scale);
        let alpha = graph.segment_softmax(scaled, &batch.edge_dst)?;
        let alpha = graph.dropout(alpha, config.dropout, train, rng)?;
        alphas.push(alpha);

        let m_src = graph.gather_rows(messages, &batch.edge_src)?;
        let mw = graph.typed_matmul(m_src, &wm_bank, &batch.edge_type_ids)?;
        let attended = graph.mul_col_vec(mw, alpha)?;
        head_aggs.push(graph.segment_sum_rows(attended, &batch.edge_dst, n)?);
    }
    let aggregated = graph.concat_cols(&head_aggs)?;
    let c_bank = node_bank(binding, registries, &format!("enc.l{layer}.c"));
    let combined = graph.typed_matmul(aggregated, &c_bank, &batch.node_type_ids)?;
    let activated = graph.gelu(combined);
    let activated = graph.dropout(activated, config.dropout, train, rng)?;
    let next = graph.add(activated, states)?;
    Ok((next, alphas))
}

/// Gated readout: `sum_v sigmoid(gate(h_v)) ⊙ value(h_v)` per graph segment.
pub fn global_attention_pool(
    graph: &mut Graph,
    binding: &ParamBinding,
    states: TensorId,
    batch: &BatchGraph,
) -> Result<TensorId, HgtError> {
    if batch.graph_count == 0 || batch.node_count() == 0 {
        return Err(HgtError::EmptyBatch);
    }
    let gate_lin = graph.matmul(states, binding.id("pool.gate.w"))?;
    let gate_lin = graph.add_row_broadcast(gate_lin, binding.id("pool.gate.b"))?;
    let gates = graph.sigmoid(gate_lin);
    let value_lin = graph.matmul(states, binding.id("pool.value.w"))?;
    let value_lin = graph.add_row_broadcast(value_lin, binding.id("pool.value.b"))?;
    let gated = graph.mul(gates, value_lin)?;
    Ok(graph.segment_sum_rows(gated, &batch.graph_of, batch.graph_count)?)
}
