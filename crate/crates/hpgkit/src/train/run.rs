//! The two training loops (structural classification and method naming),
//! their evaluation passes, and checkpoint bundles that carry everything a
//! later process needs to reproduce an evaluation exactly.
//!
//! Determinism contract: given the same corpus, configuration and seed, a
//! rerun produces bit-identical metric histories and parameters. Every RNG
//! draw comes from a stream derived from (seed, purpose, step), evaluation
//! always runs one example per batch so results are independent of batch
//! composition, and parameters are stored and enumerated in insertion order.

use super::corpus::{Corpus, Example, Split};
use super::optim::{clip_global_norm, collect_gradients, AdamW};
use super::{AblationFlags, TrainConfig, TrainError};
use crate::asdl::{build_registries, AsdlGrammar, TypeRegistries};
use crate::frontend::{document_to_ast, parse_source};
use crate::heads::{
    accuracy, argmax_rows, classify, decode_distributions, decode_loss, decoder_vocab,
    extended_target_ids, generate, init_classifier_params, init_decoder_params, subtoken_prf,
    teacher_input_ids, ClassifierConfig, DecodeOutput, DecoderConfig,
};
use crate::hgt::{
    encode, global_attention_pool, init_encoder_params, init_pool_params, BatchGraph, HgtConfig,
    Vocab, UNK_TOKEN,
};
use crate::hpg::{
    build_graph_with, erase_types, mask_method_name, BuildOptions, Hpg, SubtokenScheme,
};
use crate::numeric::{
    load_checkpoint, save_checkpoint, Graph, ParamBinding, ParamStore, TensorId,
};
use crate::util::seeded_rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Naming,
}

/// A corpus example lowered to a graph, ready to batch.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub graph: Hpg,
    pub label: Option<usize>,
    pub target: Option<Vec<String>>,
}

/// Lower corpus examples to graphs: parse (or adopt the exported tree),
/// build the graph under the requested subtoken scheme and edge ablations,
/// mask the method name for naming, then erase types if asked to. Masking
/// happens before erasure so the mask sentinel survives either way.
pub fn prepare_examples(
    examples: &[&Example],
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
    scheme: SubtokenScheme,
    ablation: AblationFlags,
    task: Task,
) -> Result<Vec<PreparedExample>, TrainError> {
    let options = BuildOptions {
        scheme,
        next_sib: !ablation.no_next_sib,
        next_token: !ablation.no_next_token,
    };
    let mut prepared = Vec::with_capacity(examples.len());
    for example in examples {
        let ast = match (&example.source, &example.ast) {
            (Some(source), _) => parse_source(source, grammar)?,
            (None, Some(doc)) => document_to_ast(doc),
            (None, None) => {
                return Err(TrainError::Corpus(format!(
                    "example `{}` has neither source nor an exported tree",
                    example.id
                )))
            }
        };
        let mut graph = build_graph_with(&ast, registries, &options)?;
        let mut target = None;
        if task == Task::Naming {
            let (masked, name_parts) = mask_method_name(graph, &ast)?;
            graph = masked;
            target = Some(example.target_subtokens.clone().unwrap_or(name_parts));
        }
        if ablation.erase_node_types || ablation.erase_edge_types {
            graph = erase_types(graph, ablation.erase_node_types, ablation.erase_edge_types);
        }
        prepared.push(PreparedExample { id: example.id.clone(), graph, label: example.label, target });
    }
    Ok(prepared)
}

/// Encoder input vocabulary: every node value of the given graphs, in graph
/// and node order, with the unknown marker first.
pub fn value_vocab(prepared: &[PreparedExample]) -> Vocab {
    let values = prepared.iter().flat_map(|p| p.graph.nodes.iter().map(|n| n.value.clone()));
    Vocab::new(&[UNK_TOKEN], values)
}

/// One metrics line: loss plus the task metric (accuracy or mean F1) at a
/// step, for one split. Serializes with exactly these four fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub metric: f64,
}

/// Per-example naming outcome for error analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: Vec<String>,
    pub target: Vec<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Result of one evaluation pass over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    /// Accuracy for classification, mean F1 for naming.
    pub metric: f64,
    /// Per-example records; classification leaves this empty.
    pub predictions: Vec<PredictionRecord>,
}

// ---- checkpoint bundles --------------------------------------------------------

/// Everything needed to rebuild and run a trained classifier.
#[derive(Debug, Clone)]
pub struct ClassifyBundle {
    pub encoder: HgtConfig,
    pub classifier: ClassifierConfig,
    pub vocab: Vocab,
    pub scheme: SubtokenScheme,
    pub ablation: AblationFlags,
    pub store: ParamStore,
}

/// Everything needed to rebuild and run a trained namer.
#[derive(Debug, Clone)]
pub struct NamingBundle {
    pub encoder: HgtConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocab,
    pub scheme: SubtokenScheme,
    pub ablation: AblationFlags,
    pub store: ParamStore,
}

fn expect_task(meta: &serde_json::Value, want: &str) -> Result<(), TrainError> {
    match meta.get("task").and_then(|v| v.as_str()) {
        Some(task) if task == want => Ok(()),
        Some(task) => Err(TrainError::BadConfig(format!(
            "checkpoint holds a {task} model, expected {want}"
        ))),
        None => Err(TrainError::BadConfig("checkpoint metadata lacks a task".into())),
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    name: &str,
) -> Result<T, TrainError> {
    let value = meta
        .get(name)
        .ok_or_else(|| TrainError::BadConfig(format!("checkpoint metadata lacks `{name}`")))?;
    Ok(serde_json::from_value(value.clone())?)
}

impl ClassifyBundle {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = serde_json::json!({
            "task": "classification",
            "encoder": self.encoder,
            "classifier": self.classifier,
            "vocab": self.vocab,
            "scheme": self.scheme,
            "ablation": self.ablation,
        });
        save_checkpoint(path, &meta, &self.store)?;
        Ok(())
    }

    /// Rebuild from already-loaded checkpoint parts.
    pub fn from_parts(meta: &serde_json::Value, store: ParamStore) -> Result<Self, TrainError> {
        expect_task(meta, "classification")?;
        Ok(ClassifyBundle {
            encoder: meta_field(meta, "encoder")?,
            classifier: meta_field(meta, "classifier")?,
            vocab: meta_field(meta, "vocab")?,
            scheme: meta_field(meta, "scheme")?,
            ablation: meta_field(meta, "ablation")?,
            store,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (meta, store) = load_checkpoint(path)?;
        Self::from_parts(&meta, store)
    }
}

impl NamingBundle {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = serde_json::json!({
            "task": "naming",
            "encoder": self.encoder,
            "decoder": self.decoder,
            "vocab": self.vocab,
            "scheme": self.scheme,
            "ablation": self.ablation,
        });
        save_checkpoint(path, &meta, &self.store)?;
        Ok(())
    }

    /// Rebuild from already-loaded checkpoint parts.
    pub fn from_parts(meta: &serde_json::Value, store: ParamStore) -> Result<Self, TrainError> {
        expect_task(meta, "naming")?;
        Ok(NamingBundle {
            encoder: meta_field(meta, "encoder")?,
            decoder: meta_field(meta, "decoder")?,
            vocab: meta_field(meta, "vocab")?,
            scheme: meta_field(meta, "scheme")?,
            ablation: meta_field(meta, "ablation")?,
            store,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (meta, store) = load_checkpoint(path)?;
        Self::from_parts(&meta, store)
    }
}

/// Render a metric history as line-delimited JSON, one record per line.
pub fn metrics_jsonl(history: &[MetricRecord]) -> Result<String, TrainError> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

// ---- shared forward passes -----------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn classification_logits(
    graph: &mut Graph,
    binding: &ParamBinding,
    batch: &BatchGraph,
    encoder: &HgtConfig,
    classifier: &ClassifierConfig,
    registries: &TypeRegistries,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<TensorId, TrainError> {
    let states = encode(graph, binding, batch, encoder, registries, train, rng)?;
    let pooled = global_attention_pool(graph, binding, states, batch)?;
    Ok(classify(graph, binding, classifier, pooled)?)
}

struct DecodedExample {
    loss: TensorId,
    output: DecodeOutput,
    target_ids: Vec<usize>,
    memory: TensorId,
    memory_values: Vec<String>,
}

/// Teacher-forced decode of one graph out of a batch: its decoding memory is
/// the subtoken rows (or all node rows under the ablation), and the loss is
/// the mean negative log-likelihood of the target plus end marker.
#[allow(clippy::too_many_arguments)]
fn decode_teacher_forced(
    graph: &mut Graph,
    binding: &ParamBinding,
    decoder: &DecoderConfig,
    states: TensorId,
    batch: &BatchGraph,
    graph_ix: usize,
    target: &[String],
    ablation: AblationFlags,
    train: bool,
    rng: &mut ChaCha20Rng,
) -> Result<DecodedExample, TrainError> {
    let rows: &[usize] = if ablation.decode_all_nodes {
        &batch.node_rows[graph_ix]
    } else {
        &batch.subtoken_rows[graph_ix]
    };
    let memory = graph.gather_rows(states, rows)?;
    let memory_values: Vec<String> =
        rows.iter().map(|&r| batch.node_values[r].clone()).collect();
    let use_copy = !ablation.no_copy;
    let input_ids = teacher_input_ids(&decoder.vocab, target);
    let output = decode_distributions(
        graph,
        binding,
        decoder,
        memory,
        &memory_values,
        &input_ids,
        use_copy,
        train,
        rng,
    )?;
    let target_ids = extended_target_ids(&decoder.vocab, &output.extras, target, use_copy);
    let loss = decode_loss(graph, &output, &target_ids)?;
    Ok(DecodedExample { loss, output, target_ids, memory, memory_values })
}

fn require_label(example: &PreparedExample) -> Result<usize, TrainError> {
    example
        .label
        .ok_or_else(|| TrainError::Corpus(format!("example `{}` has no label", example.id)))
}

fn require_target(example: &PreparedExample) -> Result<&Vec<String>, TrainError> {
    example
        .target
        .as_ref()
        .ok_or_else(|| TrainError::Corpus(format!("example `{}` has no target", example.id)))
}

// ---- evaluation ----------------------------------------------------------------

fn eval_classification_parts(
    store: &ParamStore,
    vocab: &Vocab,
    encoder: &HgtConfig,
    classifier: &ClassifierConfig,
    registries: &TypeRegistries,
    prepared: &[PreparedExample],
) -> Result<EvalReport, TrainError> {
    if prepared.is_empty() {
        return Err(TrainError::Corpus("no examples to evaluate".into()));
    }
    let mut rng = seeded_rng(0, "eval", 0);
    let mut loss_sum = 0.0;
    let mut predicted = Vec::with_capacity(prepared.len());
    let mut labels = Vec::with_capacity(prepared.len());
    for example in prepared {
        let label = require_label(example)?;
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let batch = BatchGraph::new(&[&example.graph], vocab);
        let logits = classification_logits(
            &mut graph, &binding, &batch, encoder, classifier, registries, false, &mut rng,
        )?;
        let loss = graph.cross_entropy_rows(logits, &[label])?;
        loss_sum += graph.value(loss).data[0];
        predicted.push(argmax_rows(graph.value(logits))[0]);
        labels.push(label);
    }
    let metric = accuracy(&predicted, &labels)?;
    Ok(EvalReport {
        loss: loss_sum / prepared.len() as f64,
        metric,
        predictions: Vec::new(),
    })
}

/// Loss and accuracy of a trained classifier over prepared examples,
/// evaluated one example at a time.
pub fn evaluate_classification(
    bundle: &ClassifyBundle,
    prepared: &[PreparedExample],
    registries: &TypeRegistries,
) -> Result<EvalReport, TrainError> {
    eval_classification_parts(
        &bundle.store,
        &bundle.vocab,
        &bundle.encoder,
        &bundle.classifier,
        registries,
        prepared,
    )
}

#[allow(clippy::too_many_arguments)]
fn eval_naming_parts(
    store: &ParamStore,
    vocab: &Vocab,
    encoder: &HgtConfig,
    decoder: &DecoderConfig,
    ablation: AblationFlags,
    registries: &TypeRegistries,
    prepared: &[PreparedExample],
) -> Result<EvalReport, TrainError> {
    if prepared.is_empty() {
        return Err(TrainError::Corpus("no examples to evaluate".into()));
    }
    let mut rng = seeded_rng(0, "eval", 0);
    let mut loss_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut predictions = Vec::with_capacity(prepared.len());
    for example in prepared {
        let target = require_target(example)?.clone();
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        let batch = BatchGraph::new(&[&example.graph], vocab);
        let states = encode(&mut graph, &binding, &batch, encoder, registries, false, &mut rng)?;
        let decoded = decode_teacher_forced(
            &mut graph, &binding, decoder, states, &batch, 0, &target, ablation, false, &mut rng,
        )?;
        loss_sum += graph.value(decoded.loss).data[0];
        let predicted = generate(
            &mut graph,
            &binding,
            decoder,
            decoded.memory,
            &decoded.memory_values,
            !ablation.no_copy,
        )?;
        let (precision, recall, f1) = subtoken_prf(&predicted, &target);
        f1_sum += f1;
        predictions.push(PredictionRecord {
            id: example.id.clone(),
            predicted,
            target,
            precision,
            recall,
            f1,
        });
    }
    let n = prepared.len() as f64;
    Ok(EvalReport { loss: loss_sum / n, metric: f1_sum / n, predictions })
}

/// Teacher-forced loss, greedy decoding and per-example F1 of a trained
/// namer, evaluated one example at a time.
pub fn evaluate_naming(
    bundle: &NamingBundle,
    prepared: &[PreparedExample],
    registries: &TypeRegistries,
) -> Result<EvalReport, TrainError> {
    eval_naming_parts(
        &bundle.store,
        &bundle.vocab,
        &bundle.encoder,
        &bundle.decoder,
        bundle.ablation,
        registries,
        prepared,
    )
}

// ---- training ------------------------------------------------------------------

#[derive(Debug)]
pub struct ClassifyOutcome {
    /// Trained model with the best-validation parameters (final parameters
    /// when there is no validation split).
    pub bundle: ClassifyBundle,
    pub history: Vec<MetricRecord>,
    pub best_valid: Option<MetricRecord>,
    pub test: Option<EvalReport>,
}

#[derive(Debug)]
pub struct NamingOutcome {
    pub bundle: NamingBundle,
    pub history: Vec<MetricRecord>,
    pub best_valid: Option<MetricRecord>,
    pub test: Option<EvalReport>,
}

/// Accumulates windowed training metrics between evaluation points.
#[derive(Default)]
struct Window {
    loss: f64,
    batches: usize,
    hits: usize,
    total: usize,
}

impl Window {
    fn record(&mut self, loss: f64, hits: usize, total: usize) {
        self.loss += loss;
        self.batches += 1;
        self.hits += hits;
        self.total += total;
    }

    fn flush(&mut self, step: u64) -> Option<MetricRecord> {
        if self.batches == 0 {
            return None;
        }
        let record = MetricRecord {
            step,
            split: Split::Train,
            loss: self.loss / self.batches as f64,
            metric: self.hits as f64 / self.total.max(1) as f64,
        };
        *self = Window::default();
        Some(record)
    }
}

fn shuffled_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded_rng(seed, "shuffle", epoch as u64));
    order
}

/// Train the structural classifier. Validation runs at every epoch end (and
/// every `eval_interval` steps when set); the returned bundle carries the
/// parameters of the best validation pass and the final test report is
/// computed with them.
pub fn train_classification(
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<ClassifyOutcome, TrainError> {
    config.validate()?;
    let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR)?;
    let registries = build_registries(&grammar);
    let prepare = |split: Split| {
        prepare_examples(
            &corpus.split(split),
            &grammar,
            &registries,
            config.scheme,
            config.ablation,
            Task::Classification,
        )
    };
    let train = prepare(Split::Train)?;
    let valid = prepare(Split::Valid)?;
    let test = prepare(Split::Test)?;
    if train.is_empty() {
        return Err(TrainError::Corpus("training split is empty".into()));
    }
    let train_labels: Vec<usize> =
        train.iter().map(require_label).collect::<Result<_, _>>()?;

    let vocab = value_vocab(&train);
    let mut encoder = config.encoder.clone();
    encoder.vocab_size = vocab.len();
    let classes = corpus
        .examples
        .iter()
        .filter_map(|e| e.label)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let classifier = ClassifierConfig { hidden: config.classifier_hidden.clone(), classes };
    classifier.validate().map_err(TrainError::Heads)?;

    let mut rng = seeded_rng(config.seed, "init", 0);
    let mut store = init_encoder_params(&encoder, &registries, &mut rng)?;
    init_pool_params(&encoder, &mut rng, &mut store);
    init_classifier_params(&classifier, encoder.d_model, &mut rng, &mut store);

    let mut optimizer = AdamW::new(config.lr, config.weight_decay);
    let mut history = Vec::new();
    let mut best: Option<(MetricRecord, ParamStore)> = None;
    let mut window = Window::default();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let order = shuffled_order(train.len(), config.seed, epoch);
        let batch_count = order.chunks(config.batch_size).count();
        for (batch_ix, chunk) in order.chunks(config.batch_size).enumerate() {
            let graphs: Vec<&Hpg> = chunk.iter().map(|&ix| &train[ix].graph).collect();
            let labels: Vec<usize> = chunk.iter().map(|&ix| train_labels[ix]).collect();
            let mut graph = Graph::new();
            let binding = store.bind_all(&mut graph);
            let batch = BatchGraph::new(&graphs, &vocab);
            let mut step_rng = seeded_rng(config.seed, "dropout", step);
            let logits = classification_logits(
                &mut graph, &binding, &batch, &encoder, &classifier, &registries, true,
                &mut step_rng,
            )?;
            let loss = graph.cross_entropy_rows(logits, &labels)?;
            let loss_value = graph.value(loss).data[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { what: "training loss".into(), step });
            }
            let hits = argmax_rows(graph.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            window.record(loss_value, hits, labels.len());

            let mut grads = collect_gradients(graph.backward(loss)?, &binding);
            clip_global_norm(&mut grads, 1.0);
            optimizer.step(&mut store, &grads, step)?;
            step += 1;

            let eval_due = config.eval_interval > 0
                && step % config.eval_interval as u64 == 0;
            if batch_ix + 1 == batch_count || eval_due {
                history.extend(window.flush(step));
                if !valid.is_empty() {
                    let report = eval_classification_parts(
                        &store, &vocab, &encoder, &classifier, &registries, &valid,
                    )?;
                    if !report.loss.is_finite() || !report.metric.is_finite() {
                        return Err(TrainError::NonFinite {
                            what: "validation metrics".into(),
                            step,
                        });
                    }
                    let record =
                        MetricRecord { step, split: Split::Valid, loss: report.loss, metric: report.metric };
                    if best.as_ref().map_or(true, |(b, _)| record.metric > b.metric) {
                        best = Some((record.clone(), store.clone()));
                    }
                    history.push(record);
                }
            }
        }
    }

    let (best_valid, best_store) = match best {
        Some((record, kept)) => (Some(record), kept),
        None => (None, store),
    };
    let bundle = ClassifyBundle {
        encoder,
        classifier,
        vocab,
        scheme: config.scheme,
        ablation: config.ablation,
        store: best_store,
    };
    let mut test_report = None;
    if !test.is_empty() {
        let report = evaluate_classification(&bundle, &test, &registries)?;
        if !report.loss.is_finite() || !report.metric.is_finite() {
            return Err(TrainError::NonFinite { what: "test metrics".into(), step });
        }
        history.push(MetricRecord {
            step,
            split: Split::Test,
            loss: report.loss,
            metric: report.metric,
        });
        test_report = Some(report);
    }
    Ok(ClassifyOutcome { bundle, history, best_valid, test: test_report })
}

/// Decoder output vocabulary: training-split target subtokens seen at least
/// `min_count` times, in first-seen order. Rarer words stay out, so the
/// model can only produce them through the copy mechanism.
fn restricted_decoder_vocab(
    train: &[PreparedExample],
    min_count: usize,
) -> Result<Vocab, TrainError> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for example in train {
        for token in require_target(example)? {
            *counts.entry(token.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<String> = Vec::new();
    for example in train {
        for token in require_target(example)? {
            if counts[token.as_str()] >= min_count.max(1) && !kept.iter().any(|k| k == token) {
                kept.push(token.clone());
            }
        }
    }
    Ok(decoder_vocab(kept))
}

/// Train the method namer: encode the masked graph, decode the name's
/// subtoken sequence over the graph's subtoken states with teacher forcing,
/// and track validation by greedy-decoding F1.
pub fn train_naming(corpus: &Corpus, config: &TrainConfig) -> Result<NamingOutcome, TrainError> {
    config.validate()?;
    let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR)?;
    let registries = build_registries(&grammar);
    let prepare = |split: Split| {
        prepare_examples(
            &corpus.split(split),
            &grammar,
            &registries,
            config.scheme,
            config.ablation,
            Task::Naming,
        )
    };
    let train = prepare(Split::Train)?;
    let valid = prepare(Split::Valid)?;
    let test = prepare(Split::Test)?;
    if train.is_empty() {
        return Err(TrainError::Corpus("training split is empty".into()));
    }

    let vocab = value_vocab(&train);
    let mut encoder = config.encoder.clone();
    encoder.vocab_size = vocab.len();
    let decoder = DecoderConfig {
        layers: config.decoder.layers,
        heads: config.decoder.heads,
        d_model: encoder.d_model,
        ffn_width: config.decoder.ffn_width,
        max_len: config.decoder.max_len,
        dropout: config.decoder.dropout,
        vocab: restricted_decoder_vocab(&train, config.decoder_vocab_min_count)?,
    };

    let mut rng = seeded_rng(config.seed, "init", 0);
    let mut store = init_encoder_params(&encoder, &registries, &mut rng)?;
    init_pool_params(&encoder, &mut rng, &mut store);
    init_decoder_params(&decoder, &mut rng, &mut store).map_err(TrainError::Heads)?;

    let mut optimizer = AdamW::new(config.lr, config.weight_decay);
    let mut history = Vec::new();
    let mut best: Option<(MetricRecord, ParamStore)> = None;
    let mut window = Window::default();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let order = shuffled_order(train.len(), config.seed, epoch);
        let batch_count = order.chunks(config.batch_size).count();
        for (batch_ix, chunk) in order.chunks(config.batch_size).enumerate() {
            let graphs: Vec<&Hpg> = chunk.iter().map(|&ix| &train[ix].graph).collect();
            let mut graph = Graph::new();
            let binding = store.bind_all(&mut graph);
            let batch = BatchGraph::new(&graphs, &vocab);
            let mut step_rng = seeded_rng(config.seed, "dropout", step);
            let states =
                encode(&mut graph, &binding, &batch, &encoder, &registries, true, &mut step_rng)?;
            let mut total: Option<TensorId> = None;
            let mut hits = 0;
            let mut tokens = 0;
            for (slot, &ix) in chunk.iter().enumerate() {
                let target = require_target(&train[ix])?;
                let decoded = decode_teacher_forced(
                    &mut graph, &binding, &decoder, states, &batch, slot, target,
                    config.ablation, true, &mut step_rng,
                )?;
                hits += argmax_rows(graph.value(decoded.output.probs))
                    .iter()
                    .zip(&decoded.target_ids)
                    .filter(|(p, t)| p == t)
                    .count();
                tokens += decoded.target_ids.len();
                total = Some(match total {
                    Some(t) => graph.add(t, decoded.loss)?,
                    None => decoded.loss,
                });
            }
            let summed = total.expect("chunks are never empty");
            let loss = graph.scale(summed, 1.0 / chunk.len() as f64);
            let loss_value = graph.value(loss).data[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { what: "training loss".into(), step });
            }
            window.record(loss_value, hits, tokens);

            let mut grads = collect_gradients(graph.backward(loss)?, &binding);
            clip_global_norm(&mut grads, 1.0);
            optimizer.step(&mut store, &grads, step)?;
            step += 1;

            let eval_due = config.eval_interval > 0
                && step % config.eval_interval as u64 == 0;
            if batch_ix + 1 == batch_count || eval_due {
                history.extend(window.flush(step));
                if !valid.is_empty() {
                    let report = eval_naming_parts(
                        &store, &vocab, &encoder, &decoder, config.ablation, &registries, &valid,
                    )?;
                    if !report.loss.is_finite() || !report.metric.is_finite() {
                        return Err(TrainError::NonFinite {
                            what: "validation metrics".into(),
                            step,
                        });
                    }
                    let record =
                        MetricRecord { step, split: Split::Valid, loss: report.loss, metric: report.metric };
                    if best.as_ref().map_or(true, |(b, _)| record.metric > b.metric) {
                        best = Some((record.clone(), store.clone()));
                    }
                    history.push(record);
                }
            }
        }
    }

    let (best_valid, best_store) = match best {
        Some((record, kept)) => (Some(record), kept),
        None => (None, store),
    };
    let bundle = NamingBundle {
        encoder,
        decoder,
        vocab,
        scheme: config.scheme,
        ablation: config.ablation,
        store: best_store,
    };
    let mut test_report = None;
    if !test.is_empty() {
        let report = evaluate_naming(&bundle, &test, &registries)?;
        if !report.loss.is_finite() || !report.metric.is_finite() {
            return Err(TrainError::NonFinite { what: "test metrics".into(), step });
        }
        history.push(MetricRecord {
            step,
            split: Split::Test,
            loss: report.loss,
            metric: report.metric,
        });
        test_report = Some(report);
    }
    Ok(NamingOutcome { bundle, history, best_valid, test: test_report })
}

#[cfg(test)]
mod tests {
    use super::super::corpus::{
        gen_classification_corpus, gen_naming_corpus, gen_operand_order_corpus,
    };
    use super::*;
    use crate::MASK_SENTINEL;

    fn tiny_config() -> TrainConfig {
        let mut config = TrainConfig::default();
        config.lr = 1e-3;
        config.epochs = 1;
        config.batch_size = 8;
        config.encoder = HgtConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            ffn_width: 32,
            dropout: 0.1,
            vocab_size: 0,
        };
        config.classifier_hidden = vec![16];
        config.decoder.layers = 1;
        config.decoder.heads = 2;
        config.decoder.ffn_width = 32;
        config.decoder.max_len = 6;
        config.decoder.dropout = 0.1;
        config.decoder_vocab_min_count = 2;
        config
    }

    #[test]
    fn metric_records_serialize_with_exactly_four_fields() {
        let record =
            MetricRecord { step: 3, split: Split::Valid, loss: 0.25, metric: 0.75 };
        let value: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&record).unwrap()).unwrap();
        let object = value.as_object().unwrap();
        let mut keys: Vec<&str> = object.keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["loss", "metric", "split", "step"]);
        assert_eq!(object["split"], "valid");
        let back: MetricRecord = serde_json::from_value(value).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn classification_training_is_deterministic_and_checkpoints_round_trip() {
        let corpus = gen_classification_corpus(1, 20);
        let config = tiny_config();
        let first = train_classification(&corpus, &config).unwrap();
        let second = train_classification(&corpus, &config).unwrap();
        assert_eq!(first.history, second.history);
        assert_eq!(first.bundle.store, second.bundle.store);

        assert!(first.history.iter().any(|r| r.split == Split::Train));
        assert!(first.history.iter().any(|r| r.split == Split::Valid));
        assert!(first.history.iter().any(|r| r.split == Split::Test));
        assert!(first.history.iter().all(|r| r.loss.is_finite() && r.metric.is_finite()));

        // Reloading the checkpoint reproduces the best validation pass exactly.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.ckpt");
        first.bundle.save(&path).unwrap();
        let loaded = ClassifyBundle::load(&path).unwrap();
        assert_eq!(loaded.store, first.bundle.store);
        let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let valid = prepare_examples(
            &corpus.split(Split::Valid),
            &grammar,
            &registries,
            loaded.scheme,
            loaded.ablation,
            Task::Classification,
        )
        .unwrap();
        let report = evaluate_classification(&loaded, &valid, &registries).unwrap();
        let best = first.best_valid.unwrap();
        assert_eq!(report.loss, best.loss);
        assert_eq!(report.metric, best.metric);
    }

    #[test]
    fn training_loss_decreases_on_a_learnable_corpus() {
        let corpus = gen_operand_order_corpus(5, 80);
        let mut config = tiny_config();
        config.lr = 1e-2;
        config.epochs = 3;
        let outcome = train_classification(&corpus, &config).unwrap();
        let train_records: Vec<&MetricRecord> =
            outcome.history.iter().filter(|r| r.split == Split::Train).collect();
        assert!(train_records.len() >= 2);
        let first = train_records.first().unwrap().loss;
        let last = train_records.last().unwrap().loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn fully_erased_twins_are_indistinguishable() {
        let corpus = gen_operand_order_corpus(7, 8);
        let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let ablation = AblationFlags {
            erase_node_types: true,
            erase_edge_types: true,
            ..AblationFlags::default()
        };
        let prepared = prepare_examples(
            &corpus.examples.iter().collect::<Vec<_>>(),
            &grammar,
            &registries,
            SubtokenScheme::Shared,
            ablation,
            Task::Classification,
        )
        .unwrap();
        let vocab = value_vocab(&prepared);
        let mut encoder = tiny_config().encoder;
        encoder.vocab_size = vocab.len();
        encoder.dropout = 0.0;
        let classifier = ClassifierConfig { hidden: vec![16], classes: 2 };
        let mut rng = seeded_rng(11, "init", 0);
        let mut store = init_encoder_params(&encoder, &registries, &mut rng).unwrap();
        init_pool_params(&encoder, &mut rng, &mut store);
        init_classifier_params(&classifier, encoder.d_model, &mut rng, &mut store);

        for pair in prepared.chunks(2) {
            let logits_of = |example: &PreparedExample| {
                let mut graph = Graph::new();
                let binding = store.bind_all(&mut graph);
                let batch = BatchGraph::new(&[&example.graph], &vocab);
                let mut rng = seeded_rng(0, "eval", 0);
                let logits = classification_logits(
                    &mut graph, &binding, &batch, &encoder, &classifier, &registries, false,
                    &mut rng,
                )
                .unwrap();
                graph.value(logits).data.clone()
            };
            assert_eq!(logits_of(&pair[0]), logits_of(&pair[1]));
        }
    }

    #[test]
    fn ablation_flags_compose_in_one_run() {
        let corpus = gen_classification_corpus(6, 20);
        let mut config = tiny_config();
        config.ablation = AblationFlags {
            erase_node_types: true,
            erase_edge_types: true,
            no_next_sib: true,
            no_next_token: true,
            decode_all_nodes: false,
            no_copy: false,
        };
        let outcome = train_classification(&corpus, &config).unwrap();
        assert!(outcome.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn naming_prepared_examples_mask_the_name() {
        let corpus = gen_naming_corpus(4, 5);
        let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let prepared = prepare_examples(
            &corpus.examples.iter().collect::<Vec<_>>(),
            &grammar,
            &registries,
            SubtokenScheme::Shared,
            AblationFlags::default(),
            Task::Naming,
        )
        .unwrap();
        for (example, prep) in corpus.examples.iter().zip(&prepared) {
            assert!(prep.graph.nodes.iter().any(|n| n.value == MASK_SENTINEL));
            assert_eq!(prep.target.as_ref(), example.target_subtokens.as_ref());
            assert!(!prep.target.as_ref().unwrap().is_empty());
        }
    }

    #[test]
    fn naming_training_is_deterministic_and_checkpoints_round_trip() {
        let corpus = gen_naming_corpus(2, 40);
        let mut config = tiny_config();
        config.batch_size = 4;
        let first = train_naming(&corpus, &config).unwrap();
        let second = train_naming(&corpus, &config).unwrap();
        assert_eq!(first.history, second.history);
        assert_eq!(first.bundle.store, second.bundle.store);
        assert!(first.test.as_ref().is_some_and(|r| !r.predictions.is_empty()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("namer.ckpt");
        first.bundle.save(&path).unwrap();
        let loaded = NamingBundle::load(&path).unwrap();
        assert_eq!(loaded.decoder, first.bundle.decoder);
        let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let valid = prepare_examples(
            &corpus.split(Split::Valid),
            &grammar,
            &registries,
            loaded.scheme,
            loaded.ablation,
            Task::Naming,
        )
        .unwrap();
        let report = evaluate_naming(&loaded, &valid, &registries).unwrap();
        let best = first.best_valid.unwrap();
        assert_eq!(report.loss, best.loss);
        assert_eq!(report.metric, best.metric);
    }

    #[test]
    fn the_restricted_decoder_vocabulary_keeps_only_frequent_subtokens() {
        let corpus = gen_naming_corpus(3, 25);
        let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let train = prepare_examples(
            &corpus.split(Split::Train),
            &grammar,
            &registries,
            SubtokenScheme::Shared,
            AblationFlags::default(),
            Task::Naming,
        )
        .unwrap();
        let vocab = restricted_decoder_vocab(&train, 3).unwrap();
        // Template words recur; fresh random identifiers do not.
        for word in super::super::corpus::NAMING_TEMPLATE_WORDS {
            assert!(vocab.contains(word), "missing template word `{word}`");
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for example in &train {
            for token in example.target.as_ref().unwrap() {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
        for token in vocab.tokens() {
            if [crate::hgt::UNK_TOKEN, "<PAD>", "<BOS>", "<EOS>"].contains(&token.as_str()) {
                continue;
            }
            assert!(counts[token.as_str()] >= 3, "`{token}` is rarer than the cutoff");
        }
    }

    #[test]
    fn loading_a_checkpoint_of_the_wrong_task_fails() {
        let corpus = gen_classification_corpus(1, 20);
        let outcome = train_classification(&corpus, &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.ckpt");
        outcome.bundle.save(&path).unwrap();
        let err = NamingBundle::load(&path).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig(ref m) if m.contains("classification")));
    }
}
