//! Task heads: an autoregressive transformer decoder with a copy mechanism
//! for method naming, an MLP classifier over pooled graph vectors, and the
//! evaluation metrics for both tasks.
//!
//! The decoder attends over a memory of node states (normally the subtoken
//! nodes; optionally every node). A separate single-head pointer attention
//! over the same memory produces the copy distribution: its weights, grouped
//! by node value, are mixed with the generation softmax through a learned
//! gate, so the model can emit words that are not in its output vocabulary
//! by pointing at them.

use crate::hgt::{positional_encoding, Vocab, UNK_TOKEN};
use crate::numeric::{Graph, NumericError, ParamStore, Tensor, TensorId};
use crate::numeric::ParamBinding;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Padding marker (never produced by decoding).
pub const PAD_TOKEN: &str = "<PAD>";
/// Sequence-start marker fed as the first decoder input.
pub const BOS_TOKEN: &str = "<BOS>";
/// Sequence-end marker that stops greedy decoding.
pub const EOS_TOKEN: &str = "<EOS>";

/// Additive attention mask value for disallowed positions.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("decoder vocabulary is missing the {0} marker")]
    MissingMarker(&'static str),
    #[error("decoder input must contain at least the start marker")]
    EmptyInput,
    #[error("{memory} memory rows but {values} memory values")]
    MemoryMismatch { memory: usize, values: usize },
    #[error("predictions and labels differ in length: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Build a decoder vocabulary: control markers first, then the observed
/// subtokens (first occurrence wins).
pub fn decoder_vocab<I, S>(observed: I) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    Vocab::new(&[PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN], observed)
}

/// Decoder hyperparameters and output vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    /// Longest sequence greedy decoding may emit.
    pub max_len: usize,
    pub dropout: f64,
    pub vocab: Vocab,
}

impl DecoderConfig {
    pub fn new(d_model: usize, vocab: Vocab) -> Self {
        DecoderConfig { layers: 2, heads: 4, d_model, ffn_width: 1024, max_len: 8, dropout: 0.2, vocab }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), HeadsError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.max_len == 0 {
            return Err(HeadsError::BadConfig(
                "layers, heads, d_model and max_len must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(HeadsError::BadConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HeadsError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for marker in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            if self.vocab.id(marker).is_none() {
                return Err(HeadsError::MissingMarker(match marker {
                    PAD_TOKEN => PAD_TOKEN,
                    BOS_TOKEN => BOS_TOKEN,
                    EOS_TOKEN => EOS_TOKEN,
                    _ => UNK_TOKEN,
                }));
            }
        }
        Ok(())
    }
}

/// MLP classifier shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(d_model: usize, classes: usize) -> Self {
        ClassifierConfig { hidden: vec![d_model], classes }
    }

    pub fn validate(&self) -> Result<(), HeadsError> {
        if self.classes < 2 {
            return Err(HeadsError::BadConfig(format!(
                "a classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(HeadsError::BadConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

// ---- parameter construction -------------------------------------------------

pub fn init_classifier_params(
    config: &ClassifierConfig,
    d_model: usize,
    rng: &mut ChaCha20Rng,
    store: &mut ParamStore,
) {
    let mut width = d_model;
    for (i, &h) in config.hidden.iter().enumerate() {
        store.insert(format!("cls.h{i}.w"), Tensor::xavier_uniform(width, h, rng));
        store.insert(format!("cls.h{i}.b"), Tensor::zeros(vec![h]));
        width = h;
    }
    store.insert("cls.out.w", Tensor::xavier_uniform(width, config.classes, rng));
    store.insert("cls.out.b", Tensor::zeros(vec![config.classes]));
}

pub fn init_decoder_params(
    config: &DecoderConfig,
    rng: &mut ChaCha20Rng,
    store: &mut ParamStore,
) -> Result<(), HeadsError> {
    config.validate()?;
    let d = config.d_model;
    let dh = config.head_dim();
    let v = config.vocab.len();
    store.insert("dec.embed", Tensor::normal(vec![v, d], 0.02, rng));
    for l in 0..config.layers {
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(format!("dec.l{l}.{ln}.g"), Tensor::filled(vec![d], 1.0));
            store.insert(format!("dec.l{l}.{ln}.b"), Tensor::zeros(vec![d]));
        }
        for attn in ["self", "cross"] {
            for i in 0..config.heads {
                for proj in ["q", "k", "v"] {
                    store.insert(
                        format!("dec.l{l}.{attn}.h{i}.{proj}"),
                        Tensor::xavier_uniform(d, dh, rng),
                    );
                }
            }
            store.insert(format!("dec.l{l}.{attn}.o"), Tensor::xavier_uniform(d, d, rng));
        }
        store.insert(format!("dec.l{l}.ffn.w1"), Tensor::xavier_uniform(d, config.ffn_width, rng));
        store.insert(format!("dec.l{l}.ffn.b1"), Tensor::zeros(vec![config.ffn_width]));
        store.insert(format!("dec.l{l}.ffn.w2"), Tensor::xavier_uniform(config.ffn_width, d, rng));
        store.insert(format!("dec.l{l}.ffn.b2"), Tensor::zeros(vec![d]));
    }
    store.insert("dec.ln.g", Tensor::filled(vec![d], 1.0));
    store.insert("dec.ln.b", Tensor::zeros(vec![d]));
    store.insert("dec.out.w", Tensor::xavier_uniform(d, v, rng));
    store.insert("dec.out.b", Tensor::zeros(vec![v]));
    store.insert("dec.ptr.q", Tensor::xavier_uniform(d, d, rng));
    store.insert("dec.ptr.k", Tensor::xavier_uniform(d, d, rng));
    store.insert("dec.pcopy.w", Tensor::xavier_uniform(d, 1, rng));
    store.insert("dec.pcopy.b", Tensor::zeros(vec![1]));
    Ok(())
}

// ---- vocabulary extension for copied words -----------------------------------

/// Values present in the memory but absent from the output vocabulary, in
/// first-occurrence order. Copying gives each a temporary id after the base
/// vocabulary, so the mixture can put mass on words the generator cannot.
pub fn extension_tokens(vocab: &Vocab, memory_values: &[String]) -> Vec<String> {
    let mut extras: Vec<String> = Vec::new();
    for value in memory_values {
        if vocab.id(value).is_none() && !extras.iter().any(|e| e == value) {
            extras.push(value.clone());
        }
    }
    extras
}

/// Map target subtokens to ids over vocabulary ∪ extras, appending the end
/// marker. Without copying, out-of-vocabulary targets clamp to `<UNK>`.
pub fn extended_target_ids(
    vocab: &Vocab,
    extras: &[String],
    target: &[String],
    use_copy: bool,
) -> Vec<usize> {
    let unk = vocab.id_or_unk(UNK_TOKEN);
    let mut ids: Vec<usize> = target
        .iter()
        .map(|t| {
            vocab.id(t).or_else(|| {
                if use_copy {
                    extras.iter().position(|e| e == t).map(|ix| vocab.len() + ix)
                } else {
                    None
                }
            })
            .unwrap_or(unk)
        })
        .collect();
    ids.push(vocab.id(EOS_TOKEN).expect("validated vocabulary"));
    ids
}

/// Decoder input ids for teacher forcing: the start marker followed by the
/// target, clamped to the base vocabulary (the embedding table has no rows
/// for copied words).
pub fn teacher_input_ids(vocab: &Vocab, target: &[String]) -> Vec<usize> {
    let mut ids = vec![vocab.id(BOS_TOKEN).expect("validated vocabulary")];
    ids.extend(target.iter().map(|t| vocab.id_or_unk(t)));
    ids
}

// ---- decoder forward ----------------------------------------------------------

/// Per-position output distributions of one decoded sequence.
#[derive(Debug)]
pub struct DecodeOutput {
    /// `[T, vocab ∪ extras]` mixture distribution per input position.
    pub probs: TensorId,
    /// `[T]` copy gate per position; a constant zero vector when the copy
    /// branch is disabled.
    pub p_copy: TensorId,
    /// Copied-word ids start at `vocab.len()`; `extras[k]` is the word for
    /// id `vocab.len() + k`.
    pub extras: Vec<String>,
}

struct AttentionInputs {
    queries: TensorId,
    keys: TensorId,
    values_src: TensorId,
    mask: Option<TensorId>,
}

#[allow(clippy::too_many_arguments)]
fn multi_head_attention(
    graph: &mut Graph,
    binding: &ParamBinding,
    prefix: &str,
    heads: usize,
    dh: usize,
    inputs: &AttentionInputs,
    dropout: f64,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<TensorId, NumericError> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = graph.matmul(inputs.queries, binding.id(&format!("{prefix}.h{i}.q")))?;
        let k = graph.matmul(inputs.keys, binding.id(&format!("{prefix}.h{i}.k")))?;
        let v = graph.matmul(inputs.values_src, binding.id(&format!("{prefix}.h{i}.v")))?;
        let kt = graph.transpose(k)?;
        let scores = graph.matmul(q, kt)?;
        let scores = graph.scale(scores, scale);
        let scores = match inputs.mask {
            Some(mask) => graph.add(scores, mask)?,
            None => scores,
        };
        let alpha = graph.softmax_rows(scores)?;
        let alpha = graph.dropout(alpha, dropout, train, rng)?;
        outs.push(graph.matmul(alpha, v)?);
    }
    let cat = graph.concat_cols(&outs)?;
    graph.matmul(cat, binding.id(&format!("{prefix}.o")))
}

fn layer_norm(
    graph: &mut Graph,
    binding: &ParamBinding,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId, NumericError> {
    graph.layer_norm_rows(x, binding.id(&format!("{prefix}.g")), binding.id(&format!("{prefix}.b")))
}

/// Scatter matrix mapping memory positions to word ids over
/// vocabulary ∪ extras: row `i` is one-hot at the id of `values[i]`.
fn copy_scatter(vocab: &Vocab, extras: &[String], values: &[String]) -> Tensor {
    let v_ext = vocab.len() + extras.len();
    let mut m = Tensor::zeros(vec![values.len(), v_ext]);
    for (i, value) in values.iter().enumerate() {
        let id = vocab
            .id(value)
            .or_else(|| extras.iter().position(|e| e == value).map(|ix| vocab.len() + ix))
            .expect("extras cover every out-of-vocabulary memory value");
        m.data[i * v_ext + id] = 1.0;
    }
    m
}

/// Mix a generation distribution with a copy distribution through the copy
/// gate: `P(w) = (1 − p_copy)·P_vocab(w) + p_copy·Σ_{i: value_i = w} α_i`.
/// Returns `[T, vocab ∪ extras]`.
pub(crate) fn copy_mixture(
    graph: &mut Graph,
    vocab: &Vocab,
    vocab_probs: TensorId,
    pointer_alpha: TensorId,
    p_copy: TensorId,
    extras: &[String],
    memory_values: &[String],
) -> Result<TensorId, NumericError> {
    let v_ext = vocab.len() + extras.len();
    let scatter = graph.constant(copy_scatter(vocab, extras, memory_values));
    let copy_dist = graph.matmul(pointer_alpha, scatter)?;
    let padded = graph.pad_cols(vocab_probs, v_ext)?;
    let p_gen = {
        let neg = graph.scale(p_copy, -1.0);
        graph.add_const(neg, 1.0)
    };
    let gen_part = graph.mul_col_vec(padded, p_gen)?;
    let copy_part = graph.mul_col_vec(copy_dist, p_copy)?;
    graph.add(gen_part, copy_part)
}

/// Run the decoder over one teacher-forced input prefix. Position `t` of the
/// result distributes over the word at position `t+1`; row order matches
/// `input_ids`. The copy branch is active only when `use_copy` holds and the
/// memory is nonempty — a graph without subtoken nodes decodes as a pure
/// generator with the gate pinned to zero.
#[allow(clippy::too_many_arguments)]
pub fn decode_distributions(
    graph: &mut Graph,
    binding: &ParamBinding,
    config: &DecoderConfig,
    memory: TensorId,
    memory_values: &[String],
    input_ids: &[usize],
    use_copy: bool,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<DecodeOutput, HeadsError> {
    config.validate()?;
    if input_ids.is_empty() {
        return Err(HeadsError::EmptyInput);
    }
    let mem_rows = graph.value(memory).shape[0];
    if mem_rows != memory_values.len() {
        return Err(HeadsError::MemoryMismatch { memory: mem_rows, values: memory_values.len() });
    }
    let t_len = input_ids.len();
    let d = config.d_model;

    let embed = graph.gather_rows(binding.id("dec.embed"), input_ids)?;
    let positions: Vec<u64> = (0..t_len as u64).collect();
    let pe = graph.constant(positional_encoding(&positions, d));
    let mut x = graph.add(embed, pe)?;
    x = graph.dropout(x, config.dropout, train, rng)?;

    // Strictly-upper-triangular additive mask keeps attention causal.
    let causal = {
        let mut m = Tensor::zeros(vec![t_len, t_len]);
        for i in 0..t_len {
            for j in (i + 1)..t_len {
                m.data[i * t_len + j] = MASKED_SCORE;
            }
        }
        graph.constant(m)
    };

    for l in 0..config.layers {
        let normed = layer_norm(graph, binding, &format!("dec.l{l}.ln1"), x)?;
        let attended = multi_head_attention(
            graph,
            binding,
            &format!("dec.l{l}.self"),
            config.heads,
            config.head_dim(),
            &AttentionInputs { queries: normed, keys: normed, values_src: normed, mask: Some(causal) },
            config.dropout,
            train,
            rng,
        )?;
        let attended = graph.dropout(attended, config.dropout, train, rng)?;
        x = graph.add(x, attended)?;

        if mem_rows > 0 {
            let normed = layer_norm(graph, binding, &format!("dec.l{l}.ln2"), x)?;
            let attended = multi_head_attention(
                graph,
                binding,
                &format!("dec.l{l}.cross"),
                config.heads,
                config.head_dim(),
                &AttentionInputs { queries: normed, keys: memory, values_src: memory, mask: None },
                config.dropout,
                train,
                rng,
            )?;
            let attended = graph.dropout(attended, config.dropout, train, rng)?;
            x = graph.add(x, attended)?;
        }

        let normed = layer_norm(graph, binding, &format!("dec.l{l}.ln3"), x)?;
        let h = graph.matmul(normed, binding.id(&format!("dec.l{l}.ffn.w1")))?;
        let h = graph.add_row_broadcast(h, binding.id(&format!("dec.l{l}.ffn.b1")))?;
        let h = graph.gelu(h);
        let h = graph.dropout(h, config.dropout, train, rng)?;
        let h = graph.matmul(h, binding.id(&format!("dec.l{l}.ffn.w2")))?;
        let h = graph.add_row_broadcast(h, binding.id(&format!("dec.l{l}.ffn.b2")))?;
        let h = graph.dropout(h, config.dropout, train, rng)?;
        x = graph.add(x, h)?;
    }
    x = layer_norm(graph, binding, "dec.ln", x)?;

    let logits = graph.matmul(x, binding.id("dec.out.w"))?;
    let logits = graph.add_row_broadcast(logits, binding.id("dec.out.b"))?;
    let vocab_probs = graph.softmax_rows(logits)?;

    if !use_copy || mem_rows == 0 {
        let p_copy = graph.constant(Tensor::vector(vec![0.0; t_len]));
        return Ok(DecodeOutput { probs: vocab_probs, p_copy, extras: Vec::new() });
    }

    // Pointer attention: one full-width head over the memory, no dropout, so
    // the copy weights stay a clean distribution.
    let q = graph.matmul(x, binding.id("dec.ptr.q"))?;
    let k = graph.matmul(memory, binding.id("dec.ptr.k"))?;
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scores = graph.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = graph.softmax_rows(scores)?;

    let context = graph.matmul(alpha, memory)?;
    let gate = graph.matmul(context, binding.id("dec.pcopy.w"))?;
    let gate = graph.add_row_broadcast(gate, binding.id("dec.pcopy.b"))?;
    let gate = graph.sigmoid(gate);
    let p_copy = graph.reshape(gate, vec![t_len])?;

    let extras = extension_tokens(&config.vocab, memory_values);
    let probs =
        copy_mixture(graph, &config.vocab, vocab_probs, alpha, p_copy, &extras, memory_values)?;
    Ok(DecodeOutput { probs, p_copy, extras })
}

/// Mean negative log-likelihood of the target ids under the per-position
/// distributions.
pub fn decode_loss(
    graph: &mut Graph,
    output: &DecodeOutput,
    target_ids: &[usize],
) -> Result<TensorId, HeadsError> {
    Ok(graph.nll_rows(output.probs, target_ids)?)
}

/// Greedy decoding from the start marker until the end marker or the length
/// cap. Copied out-of-vocabulary words are emitted verbatim (and fed back as
/// `<UNK>`, since the embedding has no row for them). Padding and start
/// markers are never emitted.
pub fn generate(
    graph: &mut Graph,
    binding: &ParamBinding,
    config: &DecoderConfig,
    memory: TensorId,
    memory_values: &[String],
    use_copy: bool,
) -> Result<Vec<String>, HeadsError> {
    config.validate()?;
    let bos = config.vocab.id(BOS_TOKEN).expect("validated vocabulary");
    let eos = config.vocab.id(EOS_TOKEN).expect("validated vocabulary");
    let pad = config.vocab.id(PAD_TOKEN).expect("validated vocabulary");
    let unk = config.vocab.id_or_unk(UNK_TOKEN);
    let base = config.vocab.len();

    // Greedy decoding draws nothing from the stream; the argument only
    // satisfies the shared forward signature.
    let mut rng = crate::util::seeded_rng(0, "decode-greedy", 0);
    let mut input_ids = vec![bos];
    let mut words = Vec::new();
    for _ in 0..config.max_len {
        let out = decode_distributions(
            graph,
            binding,
            config,
            memory,
            memory_values,
            &input_ids,
            use_copy,
            false,
            &mut rng,
        )?;
        let probs = graph.value(out.probs);
        let row = probs.row(input_ids.len() - 1);
        let mut best = eos;
        let mut best_p = f64::NEG_INFINITY;
        for (w, &p) in row.iter().enumerate() {
            if w == pad || w == bos {
                continue;
            }
            if p > best_p {
                best = w;
                best_p = p;
            }
        }
        if best == eos {
            break;
        }
        if best >= base {
            words.push(out.extras[best - base].clone());
            input_ids.push(unk);
        } else {
            words.push(config.vocab.token(best).to_string());
            input_ids.push(best);
        }
    }
    Ok(words)
}

// ---- classifier ------------------------------------------------------------------

/// MLP over pooled graph vectors: GELU hidden layers, linear output logits.
pub fn classify(
    graph: &mut Graph,
    binding: &ParamBinding,
    config: &ClassifierConfig,
    pooled: TensorId,
) -> Result<TensorId, HeadsError> {
    config.validate()?;
    let mut h = pooled;
    for i in 0..config.hidden.len() {
        h = graph.matmul(h, binding.id(&format!("cls.h{i}.w")))?;
        h = graph.add_row_broadcast(h, binding.id(&format!("cls.h{i}.b")))?;
        h = graph.gelu(h);
    }
    let logits = graph.matmul(h, binding.id("cls.out.w"))?;
    Ok(graph.add_row_broadcast(logits, binding.id("cls.out.b"))?)
}

/// Index of the largest entry per row; ties break to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (n, d) = (t.shape[0], t.shape[1]);
    (0..n)
        .map(|i| {
            let row = &t.data[i * d..(i + 1) * d];
            let mut best = 0;
            for j in 1..d {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---- metrics ----------------------------------------------------------------------

/// Case-insensitive set precision / recall / F1 between predicted and target
/// subtokens. Both empty counts as a perfect match; an empty side against a
/// nonempty one scores zero.
pub fn subtoken_prf(prediction: &[String], target: &[String]) -> (f64, f64, f64) {
    let fold = |words: &[String]| -> BTreeSet<String> {
        words.iter().map(|w| w.to_lowercase()).collect()
    };
    let pred = fold(prediction);
    let tgt = fold(target);
    if pred.is_empty() && tgt.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if pred.is_empty() || tgt.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let overlap = pred.intersection(&tgt).count() as f64;
    let precision = overlap / pred.len() as f64;
    let recall = overlap / tgt.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Exact-match fraction. An empty pair of lists is vacuously all-correct.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, HeadsError> {
    if predictions.len() != labels.len() {
        return Err(HeadsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(1.0);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check_scalar_fn;
    use crate::util::seeded_rng;

    fn tiny_decoder(vocab_words: &[&str]) -> (DecoderConfig, ParamStore) {
        let vocab = decoder_vocab(vocab_words.iter().map(|s| s.to_string()));
        let mut config = DecoderConfig::new(4, vocab);
        config.heads = 2;
        config.ffn_width = 8;
        config.dropout = 0.0;
        config.max_len = 6;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(7, "heads-test-init", 0);
        init_decoder_params(&config, &mut rng, &mut store).unwrap();
        (config, store)
    }

    fn random_memory(s: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed, "heads-test-memory", 0);
        Tensor::normal(vec![s, d], 1.0, &mut rng)
    }

    fn run_decode(
        config: &DecoderConfig,
        store: &ParamStore,
        memory: Tensor,
        memory_values: &[String],
        input_ids: &[usize],
        use_copy: bool,
    ) -> (Graph, DecodeOutput) {
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let mem = graph.constant(memory);
        let mut rng = seeded_rng(0, "heads-test-run", 0);
        let out = decode_distributions(
            &mut graph,
            &binding,
            config,
            mem,
            memory_values,
            input_ids,
            use_copy,
            false,
            &mut rng,
        )
        .unwrap();
        (graph, out)
    }

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    // --- mixture formula ---------------------------------------------------

    #[test]
    fn mixture_matches_hand_computed_example() {
        // Two memory slots share the value `x`; attention [0.3, 0.7],
        // copy gate 0.5, generator gives x probability 0.1:
        // 0.5·0.1 + 0.5·(0.3+0.7) = 0.55.
        let vocab = decoder_vocab(["x", "y"].map(String::from));
        let x_id = vocab.id("x").unwrap();
        let v = vocab.len();
        let mut graph = Graph::new();
        let mut gen_row = vec![0.0; v];
        gen_row[x_id] = 0.1;
        let rest = (1.0 - 0.1) / (v - 1) as f64;
        for (j, slot) in gen_row.iter_mut().enumerate() {
            if j != x_id {
                *slot = rest;
            }
        }
        let vocab_probs = graph.constant(Tensor::matrix(1, v, gen_row).unwrap());
        let alpha = graph.constant(Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap());
        let p_copy = graph.constant(Tensor::vector(vec![0.5]));
        let values = strings(&["x", "x"]);
        let probs =
            copy_mixture(&mut graph, &vocab, vocab_probs, alpha, p_copy, &[], &values).unwrap();
        let got = graph.value(probs);
        assert_eq!(got.shape, vec![1, v]);
        assert!((got.data[x_id] - 0.55).abs() < 1e-12);
        let sum: f64 = got.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_copy_gate_reproduces_the_generator_exactly() {
        let vocab = decoder_vocab(["a", "b"].map(String::from));
        let v = vocab.len();
        let mut graph = Graph::new();
        let gen = Tensor::matrix(1, v, vec![1.0 / v as f64; v]).unwrap();
        let vocab_probs = graph.constant(gen.clone());
        let alpha = graph.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let p_copy = graph.constant(Tensor::vector(vec![0.0]));
        let values = strings(&["zzz"]);
        let extras = extension_tokens(&vocab, &values);
        let probs =
            copy_mixture(&mut graph, &vocab, vocab_probs, alpha, p_copy, &extras, &values)
                .unwrap();
        let got = graph.value(probs);
        assert_eq!(got.shape, vec![1, v + 1]);
        assert_eq!(&got.data[..v], &gen.data[..]);
        assert_eq!(got.data[v], 0.0);
    }

    #[test]
    fn full_copy_gate_on_a_single_slot_puts_all_mass_on_its_value() {
        let vocab = decoder_vocab(["a"].map(String::from));
        let v = vocab.len();
        let mut graph = Graph::new();
        let vocab_probs = graph.constant(Tensor::matrix(1, v, vec![1.0 / v as f64; v]).unwrap());
        let alpha = graph.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let p_copy = graph.constant(Tensor::vector(vec![1.0]));
        let values = strings(&["zzz"]);
        let extras = extension_tokens(&vocab, &values);
        let probs =
            copy_mixture(&mut graph, &vocab, vocab_probs, alpha, p_copy, &extras, &values)
                .unwrap();
        let got = graph.value(probs);
        assert_eq!(got.data[v], 1.0);
        assert!(got.data[..v].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn copy_weights_group_by_value_and_conserve_mass() {
        // Mass per word must be the summed attention of slots carrying it.
        let vocab = decoder_vocab(["in"].map(String::from));
        let values = strings(&["in", "out", "in", "deep"]);
        let extras = extension_tokens(&vocab, &values);
        assert_eq!(extras, strings(&["out", "deep"]));
        let v = vocab.len();
        let mut graph = Graph::new();
        let vocab_probs = graph.constant(Tensor::matrix(1, v, vec![1.0 / v as f64; v]).unwrap());
        let alpha =
            graph.constant(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let p_copy = graph.constant(Tensor::vector(vec![1.0]));
        let probs =
            copy_mixture(&mut graph, &vocab, vocab_probs, alpha, p_copy, &extras, &values)
                .unwrap();
        let got = graph.value(probs);
        let in_id = vocab.id("in").unwrap();
        assert!((got.data[in_id] - 0.4).abs() < 1e-12); // 0.1 + 0.3
        assert!((got.data[v] - 0.2).abs() < 1e-12); // "out"
        assert!((got.data[v + 1] - 0.4).abs() < 1e-12); // "deep"
        let total: f64 = got.data.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    // --- full decoder ---------------------------------------------------------

    #[test]
    fn distributions_are_normalized_with_and_without_copying() {
        let (config, store) = tiny_decoder(&["get", "set", "value"]);
        let memory_values = strings(&["counter", "get", "limit"]);
        let memory = random_memory(3, config.d_model, 5);
        let bos = config.vocab.id(BOS_TOKEN).unwrap();
        let get = config.vocab.id("get").unwrap();
        for use_copy in [true, false] {
            let (graph, out) = run_decode(
                &config,
                &store,
                memory.clone(),
                &memory_values,
                &[bos, get, get],
                use_copy,
            );
            let probs = graph.value(out.probs);
            let v_ext = config.vocab.len() + out.extras.len();
            assert_eq!(probs.shape, vec![3, v_ext]);
            for i in 0..3 {
                let row = probs.row(i);
                assert!(row.iter().all(|&p| p >= 0.0));
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
            }
            if use_copy {
                assert_eq!(out.extras, strings(&["counter", "limit"]));
            } else {
                assert!(out.extras.is_empty());
            }
        }
    }

    #[test]
    fn row_mass_splits_between_generator_and_copier_by_the_gate() {
        let (config, store) = tiny_decoder(&["get", "set"]);
        let memory_values = strings(&["counter", "limit"]);
        let memory = random_memory(2, config.d_model, 6);
        let bos = config.vocab.id(BOS_TOKEN).unwrap();
        let (graph, out) =
            run_decode(&config, &store, memory, &memory_values, &[bos], true);
        let probs = graph.value(out.probs);
        let p_copy = graph.value(out.p_copy).data[0];
        let base = config.vocab.len();
        // Both extras are out-of-vocabulary, so every point of copied mass
        // lands in the extension columns: their total must equal the gate.
        let copied: f64 = probs.row(0)[base..].iter().sum();
        assert!((copied - p_copy).abs() < 1e-9, "copied {copied} vs gate {p_copy}");
    }

    #[test]
    fn an_empty_memory_disables_the_copy_gate() {
        let (config, store) = tiny_decoder(&["get", "set"]);
        let bos = config.vocab.id(BOS_TOKEN).unwrap();
        let (graph, out) = run_decode(
            &config,
            &store,
            Tensor::zeros(vec![0, config.d_model]),
            &[],
            &[bos, bos],
            true,
        );
        assert!(graph.value(out.p_copy).data.iter().all(|&p| p == 0.0));
        assert!(out.extras.is_empty());
        let probs = graph.value(out.probs);
        assert_eq!(probs.shape, vec![2, config.vocab.len()]);
        for i in 0..2 {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn future_inputs_cannot_change_earlier_distributions() {
        let (config, store) = tiny_decoder(&["get", "set", "value"]);
        let memory_values = strings(&["counter"]);
        let memory = random_memory(1, config.d_model, 8);
        let bos = config.vocab.id(BOS_TOKEN).unwrap();
        let get = config.vocab.id("get").unwrap();
        let set = config.vocab.id("set").unwrap();
        let value = config.vocab.id("value").unwrap();

        let (g1, o1) =
            run_decode(&config, &store, memory.clone(), &memory_values, &[bos, get, set], true);
        let (g2, o2) =
            run_decode(&config, &store, memory, &memory_values, &[bos, get, value], true);
        let p1 = g1.value(o1.probs);
        let p2 = g2.value(o2.probs);
        let v_ext = config.vocab.len() + 1;
        // Positions 0 and 1 see identical prefixes; the third input differs.
        assert_eq!(p1.data[..2 * v_ext], p2.data[..2 * v_ext]);
        assert_ne!(p1.data[2 * v_ext..], p2.data[2 * v_ext..]);
    }

    #[test]
    fn whole_decoder_gradients_match_finite_differences() {
        let (config, store) = tiny_decoder(&["get", "set"]);
        let memory_values = strings(&["counter", "get", "limit"]);
        let memory = random_memory(3, config.d_model, 9);
        let bos = config.vocab.id(BOS_TOKEN).unwrap();
        let get = config.vocab.id("get").unwrap();
        let input_ids = [bos, get];
        let extras = extension_tokens(&config.vocab, &memory_values);
        let target = extended_target_ids(&config.vocab, &extras, &strings(&["counter"]), true);

        let inputs = store.tensors();
        let outcome = check_scalar_fn("decoder", &inputs, |graph, ids| {
            let binding = store.bind_ids(ids);
            let mem = graph.constant(memory.clone());
            let mut rng = seeded_rng(0, "heads-test-run", 0);
            let out = decode_distributions(
                graph,
                &binding,
                &config,
                mem,
                &memory_values,
                &input_ids,
                true,
                false,
                &mut rng,
            )
            .expect("decode");
            graph.nll_rows(out.probs, &target)
        });
        assert!(
            outcome.ok,
            "worst deviation abs={} rel={} over {} elements",
            outcome.max_abs_diff, outcome.max_rel_diff, outcome.elements
        );
    }

    // --- teacher forcing and target mapping --------------------------------------

    #[test]
    fn teacher_inputs_prefix_bos_and_clamp_oov() {
        let vocab = decoder_vocab(["get"].map(String::from));
        let ids = teacher_input_ids(&vocab, &strings(&["get", "counter"]));
        assert_eq!(
            ids,
            vec![
                vocab.id(BOS_TOKEN).unwrap(),
                vocab.id("get").unwrap(),
                vocab.id(UNK_TOKEN).unwrap()
            ]
        );
    }

    #[test]
    fn extended_targets_use_copy_ids_only_when_copying() {
        let vocab = decoder_vocab(["get"].map(String::from));
        let extras = strings(&["counter"]);
        let target = strings(&["get", "counter", "nowhere"]);
        let with_copy = extended_target_ids(&vocab, &extras, &target, true);
        let v = vocab.len();
        assert_eq!(
            with_copy,
            vec![
                vocab.id("get").unwrap(),
                v, // first extension id
                vocab.id(UNK_TOKEN).unwrap(),
                vocab.id(EOS_TOKEN).unwrap()
            ]
        );
        let without = extended_target_ids(&vocab, &extras, &target, false);
        assert_eq!(
            without,
            vec![
                vocab.id("get").unwrap(),
                vocab.id(UNK_TOKEN).unwrap(),
                vocab.id(UNK_TOKEN).unwrap(),
                vocab.id(EOS_TOKEN).unwrap()
            ]
        );
    }

    // --- generation -----------------------------------------------------------------

    #[test]
    fn generation_stops_within_the_length_cap_and_is_deterministic() {
        let (config, store) = tiny_decoder(&["get", "set", "value"]);
        let memory_values = strings(&["counter", "limit"]);
        let run = || {
            let mut graph = Graph::new();
            let binding = store.bind_all(&mut graph);
            let mem = graph.constant(random_memory(2, config.d_model, 10));
            generate(&mut graph, &binding, &config, mem, &memory_values, true).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.len() <= config.max_len);
        for word in &a {
            assert_ne!(word, PAD_TOKEN);
            assert_ne!(word, BOS_TOKEN);
            assert_ne!(word, EOS_TOKEN);
        }
    }

    #[test]
    fn generation_handles_an_empty_memory() {
        let (config, store) = tiny_decoder(&["get"]);
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let mem = graph.constant(Tensor::zeros(vec![0, config.d_model]));
        let words = generate(&mut graph, &binding, &config, mem, &[], true).unwrap();
        assert!(words.len() <= config.max_len);
    }

    #[test]
    fn a_copy_biased_decoder_emits_memory_words_verbatim() {
        // Pin the copy gate high through its bias: with p_copy ≈ 1 the
        // argmax must be a memory value, even an out-of-vocabulary one.
        let (config, mut store) = tiny_decoder(&["get", "set"]);
        store.get_mut("dec.pcopy.b").unwrap().data[0] = 50.0;
        let memory_values = strings(&["counter"]);
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let mem = graph.constant(random_memory(1, config.d_model, 11));
        let words = generate(&mut graph, &binding, &config, mem, &memory_values, true).unwrap();
        assert!(!words.is_empty());
        assert!(words.iter().all(|w| w == "counter"), "got {words:?}");
    }

    // --- classifier -------------------------------------------------------------------

    #[test]
    fn classifier_shapes_and_uniformity_under_zero_weights() {
        let config = ClassifierConfig::new(6, 3);
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(13, "heads-test-init", 0);
        init_classifier_params(&config, 6, &mut rng, &mut store);
        for (_, tensor) in store.iter_mut() {
            tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let pooled = graph.constant(random_memory(2, 6, 14));
        let logits = classify(&mut graph, &binding, &config, pooled).unwrap();
        assert_eq!(graph.value(logits).shape, vec![2, 3]);
        let probs = graph.softmax_rows(logits).unwrap();
        for i in 0..2 {
            for &p in graph.value(probs).row(i) {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let config = ClassifierConfig::new(4, 3);
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(15, "heads-test-init", 0);
        init_classifier_params(&config, 4, &mut rng, &mut store);
        let pooled = random_memory(3, 4, 16);
        let inputs = store.tensors();
        let outcome = check_scalar_fn("classifier", &inputs, |graph, ids| {
            let binding = store.bind_ids(ids);
            let x = graph.constant(pooled.clone());
            let logits = classify(graph, &binding, &config, x).expect("classify");
            graph.cross_entropy_rows(logits, &[0, 2, 1])
        });
        assert!(outcome.ok, "abs={} rel={}", outcome.max_abs_diff, outcome.max_rel_diff);
    }

    #[test]
    fn class_count_must_be_at_least_two() {
        assert!(ClassifierConfig::new(8, 1).validate().is_err());
        assert!(ClassifierConfig::new(8, 2).validate().is_ok());
    }

    // --- metrics -------------------------------------------------------------------------

    #[test]
    fn prf_matches_the_worked_example() {
        let target = strings(&["train", "graph", "model"]);
        let pred = strings(&["train", "model"]);
        let (p, r, f1) = subtoken_prf(&pred, &target);
        assert_eq!(p, 1.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn prf_is_case_insensitive_and_set_valued() {
        let (p, r, f1) = subtoken_prf(
            &strings(&["Get", "COUNTER", "get"]),
            &strings(&["get", "counter"]),
        );
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn prf_edge_cases() {
        assert_eq!(subtoken_prf(&[], &[]), (1.0, 1.0, 1.0));
        assert_eq!(subtoken_prf(&[], &strings(&["x"])), (0.0, 0.0, 0.0));
        assert_eq!(subtoken_prf(&strings(&["x"]), &[]), (0.0, 0.0, 0.0));
        assert_eq!(subtoken_prf(&strings(&["a"]), &strings(&["b"])), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf_satisfies_the_harmonic_mean_identity() {
        let cases = [
            (vec!["a", "b", "c"], vec!["b", "c", "d", "e"]),
            (vec!["x"], vec!["x", "y"]),
            (vec!["m", "n"], vec!["m", "n"]),
        ];
        for (pred, tgt) in cases {
            let (p, r, f1) = subtoken_prf(&strings(&pred), &strings(&tgt));
            let expected = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            assert!((f1 - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[3, 2, 1]).unwrap(), 1.0 / 3.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(HeadsError::LengthMismatch { predictions: 1, labels: 2 })
        ));
    }

    #[test]
    fn argmax_rows_breaks_ties_low() {
        let t = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    // --- config validation -----------------------------------------------------------------

    #[test]
    fn decoder_vocab_must_contain_markers() {
        let bare = Vocab::new(&[], ["word".to_string()]);
        let config = DecoderConfig::new(8, bare);
        assert!(matches!(config.validate(), Err(HeadsError::MissingMarker(_))));
    }

    #[test]
    fn memory_values_must_match_memory_rows() {
        let (config, store) = tiny_decoder(&["get"]);
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let mem = graph.constant(Tensor::zeros(vec![2, config.d_model]));
        let mut rng = seeded_rng(0, "heads-test-run", 0);
        let err = decode_distributions(
            &mut graph,
            &binding,
            &config,
            mem,
            &strings(&["only-one"]),
            &[1],
            true,
            false,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, HeadsError::MemoryMismatch { memory: 2, values: 1 }));
    }
}
