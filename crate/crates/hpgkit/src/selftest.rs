//! Self-verification suite.
//!
//! Ten independent criteria covering graph construction, ablation behavior,
//! training outcomes, the evaluation metric, the numeric engine, structural
//! graph invariants over random programs, and end-to-end determinism. Each
//! criterion yields one pass/fail line; the `selftest` CLI command runs them
//! all and exits nonzero if any fail.
//!
//! The full profile trains real models and takes minutes; `quick: true`
//! shrinks corpora and budgets to smoke-test the machinery, reporting
//! threshold criteria without enforcing them.

use crate::asdl::{self, AsdlGrammar, AsdlError, TypeRegistries};
use crate::frontend::{document_to_ast, parse_source, validate_against_grammar, FrontendError};
use crate::heads::{
    classify, decode_distributions, decode_loss, decoder_vocab, extended_target_ids,
    init_classifier_params, init_decoder_params, subtoken_prf, teacher_input_ids,
    ClassifierConfig, DecoderConfig, HeadsError,
};
use crate::hgt::{
    encode, encode_with_trace, global_attention_pool, init_pool_params, BatchGraph, HgtConfig,
    HgtError, Vocab, UNK_TOKEN,
};
use crate::hpg::{
    build_graph_with, canonical_serialize, erase_types, BuildOptions, GraphError, Hpg,
    SubtokenScheme,
};
use crate::numeric::{check_scalar_fn, run_op_suite, Graph, NumericError, TensorId};
use crate::train::{
    gen_classification_corpus, gen_naming_corpus, gen_operand_order_corpus, metrics_jsonl,
    train_classification, train_naming, AblationFlags, Corpus, Split, TrainConfig, TrainError,
};
use crate::util::{seeded_rng, worker_count, write_atomic};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelftestError {
    #[error(transparent)]
    Asdl(#[from] AsdlError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hgt(#[from] HgtError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Shrink corpora and budgets; report threshold criteria without
    /// enforcing them.
    pub quick: bool,
    /// Directory receiving metrics logs and graph dumps.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub index: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub results: Vec<CriterionResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// One line per criterion plus a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "criterion {:>2} {} {}: {}",
                r.index,
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            );
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let _ = writeln!(out, "selftest: {passed}/{} criteria passed", self.results.len());
        out
    }
}

/// Corpus sizes and budgets for one suite run.
struct Profile {
    twin_examples: usize,
    operand_examples: usize,
    operand_epochs: usize,
    class_per_class: usize,
    class_epochs: usize,
    naming_examples: usize,
    naming_epochs: usize,
    programs: usize,
    /// When false (quick mode), threshold criteria report but do not fail.
    enforce: bool,
}

impl Profile {
    fn full() -> Profile {
        Profile {
            twin_examples: 400,
            operand_examples: 400,
            operand_epochs: 3,
            class_per_class: 580,
            class_epochs: 2,
            naming_examples: 600,
            naming_epochs: 4,
            programs: 1000,
            enforce: true,
        }
    }

    fn quick() -> Profile {
        Profile {
            twin_examples: 40,
            operand_examples: 80,
            operand_epochs: 1,
            class_per_class: 24,
            class_epochs: 1,
            naming_examples: 60,
            naming_epochs: 1,
            programs: 100,
            enforce: false,
        }
    }
}

pub fn run_selftest(options: &SelftestOptions) -> Result<SelftestReport, SelftestError> {
    let profile = if options.quick { Profile::quick() } else { Profile::full() };
    std::fs::create_dir_all(&options.out_dir)?;
    let grammar = asdl::parse(crate::MINILANG_GRAMMAR)?;
    let registries = asdl::build_registries(&grammar);

    let mut results = Vec::with_capacity(10);
    // Progress goes to the error stream as each criterion lands; the caller
    // prints the final report on stdout.
    fn push(results: &mut Vec<CriterionResult>, r: CriterionResult) {
        eprintln!(
            "criterion {:>2} {} {}: {}",
            r.index,
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        results.push(r);
    }

    let c1 = criterion_twin_pairs(options, &profile, &registries)?;
    push(&mut results, c1);
    let c2 = criterion_operand_order(options, &profile)?;
    push(&mut results, c2);
    let class_runs = classification_runs(options, &profile)?;
    let c3 = criterion_type_ablation(&profile, &class_runs);
    push(&mut results, c3);
    let c4 = criterion_crafted_edge_ablation(&profile, &class_runs);
    push(&mut results, c4);
    let naming_runs = naming_runs(options, &profile)?;
    let c5 = criterion_pointer_necessity(&profile, &naming_runs);
    push(&mut results, c5);
    let c6 = criterion_decode_strategy(&profile, &naming_runs);
    push(&mut results, c6);
    let c7 = criterion_metric_oracle();
    push(&mut results, c7);
    let c8 = criterion_numeric_suite(options, &profile, &grammar, &registries)?;
    push(&mut results, c8);
    let c9 = criterion_graph_invariants(options, &profile, &grammar, &registries)?;
    push(&mut results, c9);
    let c10 = criterion_determinism(options, &profile, &registries)?;
    push(&mut results, c10);

    Ok(SelftestReport { results })
}

/// Run `jobs` independent closures on a bounded pool, preserving order.
fn parallel<T, F>(jobs: usize, f: F) -> Result<Vec<T>, SelftestError>
where
    T: Send,
    F: Fn(usize) -> Result<T, SelftestError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(jobs))
        .build()
        .map_err(|e| SelftestError::Pool(e.to_string()))?;
    pool.install(|| (0..jobs).into_par_iter().map(&f).collect())
}

/// Desk-scale training configuration shared by the trained criteria.
fn desk_config(seed: u64, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        seed,
        batch_size: 8,
        encoder: HgtConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            ffn_width: 256,
            dropout: 0.1,
            vocab_size: 0,
        },
        ..TrainConfig::default()
    }
}

fn test_metric(
    test: &Option<crate::train::EvalReport>,
    what: &str,
) -> Result<f64, SelftestError> {
    test.as_ref()
        .map(|r| r.metric)
        .ok_or_else(|| SelftestError::Other(format!("{what}: corpus has no test split")))
}

// ---- criterion 1: twin pairs --------------------------------------------------------

/// The operand-order twins must serialize identically once fully type-erased
/// and differently while typed.
fn criterion_twin_pairs(
    options: &SelftestOptions,
    profile: &Profile,
    registries: &TypeRegistries,
) -> Result<CriterionResult, SelftestError> {
    let started = Instant::now();
    let corpus = gen_operand_order_corpus(options.seed, profile.twin_examples);
    let dumps = twin_dumps(&corpus, registries)?;
    let mut pairs = 0;
    let mut typed_differ = true;
    let mut erased_identical = true;
    for (typed_a, typed_b, erased_a, erased_b) in &dumps {
        pairs += 1;
        typed_differ &= typed_a != typed_b;
        erased_identical &= erased_a == erased_b;
    }
    let elapsed = started.elapsed().as_secs_f64();

    if let Some((typed_a, typed_b, erased_a, erased_b)) = dumps.first() {
        write_atomic(&options.out_dir.join("twin-typed-a.hpg"), typed_a.as_bytes())?;
        write_atomic(&options.out_dir.join("twin-typed-b.hpg"), typed_b.as_bytes())?;
        write_atomic(&options.out_dir.join("twin-erased-a.hpg"), erased_a.as_bytes())?;
        write_atomic(&options.out_dir.join("twin-erased-b.hpg"), erased_b.as_bytes())?;
    }

    let mut passed = typed_differ && erased_identical;
    if profile.enforce {
        passed &= pairs >= 200 && elapsed < 10.0;
    }
    Ok(CriterionResult {
        index: 1,
        name: "twin-pairs",
        passed,
        detail: format!(
            "{pairs} pairs: typed dumps differ={typed_differ}, erased byte-identical={erased_identical} ({elapsed:.1}s)"
        ),
    })
}

/// Per pair: typed serializations of both members plus fully erased ones.
fn twin_dumps(
    corpus: &Corpus,
    registries: &TypeRegistries,
) -> Result<Vec<(String, String, String, String)>, SelftestError> {
    let options = BuildOptions::default();
    let mut dumps = Vec::with_capacity(corpus.examples.len() / 2);
    for chunk in corpus.examples.chunks(2) {
        if chunk.len() < 2 {
            break;
        }
        let mut members = Vec::with_capacity(2);
        for example in chunk {
            let document = example
                .ast
                .as_ref()
                .ok_or_else(|| SelftestError::Other(format!("example `{}` has no tree", example.id)))?;
            let ast = document_to_ast(document);
            let graph = build_graph_with(&ast, registries, &options)?;
            let typed = canonical_serialize(&graph);
            let erased = canonical_serialize(&erase_types(graph, true, true));
            members.push((typed, erased));
        }
        let (typed_b, erased_b) = members.pop().expect("two members");
        let (typed_a, erased_a) = members.pop().expect("two members");
        dumps.push((typed_a, typed_b, erased_a, erased_b));
    }
    Ok(dumps)
}

// ---- criterion 2: operand order -----------------------------------------------------

/// One operand-order training run; returns test accuracy, the metrics log,
/// and the wall time.
fn operand_run(
    corpus: &Corpus,
    seed: u64,
    epochs: usize,
    ablation: AblationFlags,
) -> Result<(f64, String, f64), SelftestError> {
    let started = Instant::now();
    let mut config = desk_config(seed, epochs, 1e-3);
    config.ablation = ablation;
    let outcome = train_classification(corpus, &config)?;
    let acc = test_metric(&outcome.test, "operand run")?;
    let metrics = metrics_jsonl(&outcome.history)?;
    Ok((acc, metrics, started.elapsed().as_secs_f64()))
}

/// Fully erased twins force exactly-coin-flip accuracy; typed graphs make the
/// task learnable to high accuracy within the time budget.
fn criterion_operand_order(
    options: &SelftestOptions,
    profile: &Profile,
) -> Result<CriterionResult, SelftestError> {
    let corpus = gen_operand_order_corpus(options.seed, profile.operand_examples);
    let erase_all = AblationFlags {
        erase_node_types: true,
        erase_edge_types: true,
        ..AblationFlags::default()
    };

    let seed = options.seed;
    let epochs = profile.operand_epochs;
    let mut runs = parallel(4, |i| {
        if i < 3 {
            operand_run(&corpus, seed + i as u64, epochs, AblationFlags::default())
        } else {
            operand_run(&corpus, seed, epochs, erase_all)
        }
    })?;
    let (erased_acc, erased_metrics, _) = runs.pop().expect("four runs");
    let typed_accs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let typed_mean = typed_accs.iter().sum::<f64>() / typed_accs.len() as f64;
    let max_secs = runs.iter().map(|r| r.2).fold(0.0, f64::max);

    write_atomic(
        &options.out_dir.join("operand-typed.metrics.jsonl"),
        runs[0].1.as_bytes(),
    )?;
    write_atomic(
        &options.out_dir.join("operand-erased.metrics.jsonl"),
        erased_metrics.as_bytes(),
    )?;

    let mut passed = erased_acc == 0.5;
    if profile.enforce {
        passed &= typed_mean >= 0.95 && max_secs <= 600.0;
    }
    Ok(CriterionResult {
        index: 2,
        name: "operand-order",
        passed,
        detail: format!(
            "erased acc {erased_acc} (exact 0.5 required), typed mean {typed_mean:.4} over {:?} ({max_secs:.0}s slowest run)",
            typed_accs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    })
}

// ---- criteria 3 & 4: classification ablations ---------------------------------------

struct ClassRuns {
    typed: Vec<f64>,
    erase_node: Vec<f64>,
    erase_edge: Vec<f64>,
    no_sib: Vec<f64>,
    no_tok: Vec<f64>,
}

fn classification_runs(
    options: &SelftestOptions,
    profile: &Profile,
) -> Result<ClassRuns, SelftestError> {
    let corpus = gen_classification_corpus(options.seed, profile.class_per_class);
    let variants: [AblationFlags; 5] = [
        AblationFlags::default(),
        AblationFlags { erase_node_types: true, ..AblationFlags::default() },
        AblationFlags { erase_edge_types: true, ..AblationFlags::default() },
        AblationFlags { no_next_sib: true, ..AblationFlags::default() },
        AblationFlags { no_next_token: true, ..AblationFlags::default() },
    ];
    let seed = options.seed;
    let epochs = profile.class_epochs;
    let accs = parallel(15, |i| {
        let variant = variants[i / 3];
        let run_seed = seed + (i % 3) as u64;
        let mut config = desk_config(run_seed, epochs, 1e-3);
        config.ablation = variant;
        let outcome = train_classification(&corpus, &config)?;
        test_metric(&outcome.test, "classification run")
    })?;
    Ok(ClassRuns {
        typed: accs[0..3].to_vec(),
        erase_node: accs[3..6].to_vec(),
        erase_edge: accs[6..9].to_vec(),
        no_sib: accs[9..12].to_vec(),
        no_tok: accs[12..15].to_vec(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Seeds on which the ablated accuracy is strictly below the typed one.
fn reduced_count(typed: &[f64], ablated: &[f64]) -> usize {
    typed.iter().zip(ablated).filter(|(t, a)| a < t).count()
}

fn fmt_accs(xs: &[f64]) -> String {
    let rounded: Vec<f64> = xs.iter().map(|a| (a * 1e4).round() / 1e4).collect();
    format!("{rounded:?}")
}

/// Erasing node types or edge types must strictly reduce classification
/// accuracy on most seeds; the typed model must be strong to begin with.
fn criterion_type_ablation(profile: &Profile, runs: &ClassRuns) -> CriterionResult {
    let typed_mean = mean(&runs.typed);
    let node_reduced = reduced_count(&runs.typed, &runs.erase_node);
    let edge_reduced = reduced_count(&runs.typed, &runs.erase_edge);
    let mut passed = true;
    if profile.enforce {
        passed = typed_mean >= 0.95 && node_reduced >= 2 && edge_reduced >= 2;
    }
    CriterionResult {
        index: 3,
        name: "type-ablation",
        passed,
        detail: format!(
            "typed {} (mean {typed_mean:.4}); erase-node {} reduces on {node_reduced}/3; erase-edge {} reduces on {edge_reduced}/3",
            fmt_accs(&runs.typed),
            fmt_accs(&runs.erase_node),
            fmt_accs(&runs.erase_edge),
        ),
    }
}

/// Dropping NextSib/NextToken must not help beyond noise and should reduce
/// accuracy on most seeds.
fn criterion_crafted_edge_ablation(profile: &Profile, runs: &ClassRuns) -> CriterionResult {
    let typed_mean = mean(&runs.typed);
    let sib_mean = mean(&runs.no_sib);
    let tok_mean = mean(&runs.no_tok);
    let sib_reduced = reduced_count(&runs.typed, &runs.no_sib);
    let tok_reduced = reduced_count(&runs.typed, &runs.no_tok);
    let within_noise = sib_mean <= typed_mean + 0.01 && tok_mean <= typed_mean + 0.01;
    let mut passed = true;
    if profile.enforce {
        passed = within_noise && sib_reduced >= 2 && tok_reduced >= 2;
    }
    CriterionResult {
        index: 4,
        name: "crafted-edge-ablation",
        passed,
        detail: format!(
            "no-sib {} (mean {sib_mean:.4}, reduces {sib_reduced}/3); no-token {} (mean {tok_mean:.4}, reduces {tok_reduced}/3) vs typed mean {typed_mean:.4}",
            fmt_accs(&runs.no_sib),
            fmt_accs(&runs.no_tok),
        ),
    }
}

// ---- criteria 5 & 6: naming ---------------------------------------------------------

struct NamingRuns {
    /// (test F1, wall seconds) per seed.
    full: Vec<(f64, f64)>,
    no_copy_f1: f64,
    all_nodes: Vec<f64>,
    /// Fraction of test-target subtokens outside the trained decoder
    /// vocabulary (reachable only through copying).
    oov_fraction: f64,
}

fn naming_runs(
    options: &SelftestOptions,
    profile: &Profile,
) -> Result<NamingRuns, SelftestError> {
    let corpus = gen_naming_corpus(options.seed, profile.naming_examples);
    let seed = options.seed;
    let epochs = profile.naming_epochs;
    let no_copy = AblationFlags { no_copy: true, ..AblationFlags::default() };
    let all_nodes = AblationFlags { decode_all_nodes: true, ..AblationFlags::default() };

    // Jobs 0-2: full model on three seeds; 3: no-copy; 4-6: all-node decoding.
    let runs = parallel(7, |i| {
        let (run_seed, ablation) = match i {
            0..=2 => (seed + i as u64, AblationFlags::default()),
            3 => (seed, no_copy),
            _ => (seed + (i - 4) as u64, all_nodes),
        };
        let started = Instant::now();
        let mut config = desk_config(run_seed, epochs, 1e-3);
        config.ablation = ablation;
        let outcome = train_naming(&corpus, &config)?;
        let f1 = test_metric(&outcome.test, "naming run")?;
        let vocab = if i == 0 { Some(outcome.bundle.decoder.vocab.clone()) } else { None };
        Ok((f1, started.elapsed().as_secs_f64(), vocab))
    })?;

    let vocab = runs[0].2.clone().expect("seed-0 run returns its vocabulary");
    let mut target_tokens = 0usize;
    let mut oov_tokens = 0usize;
    for example in corpus.split(Split::Test) {
        for token in example.target_subtokens.as_deref().unwrap_or(&[]) {
            target_tokens += 1;
            if !vocab.contains(token) {
                oov_tokens += 1;
            }
        }
    }
    let oov_fraction =
        if target_tokens == 0 { 0.0 } else { oov_tokens as f64 / target_tokens as f64 };

    Ok(NamingRuns {
        full: runs[0..3].iter().map(|r| (r.0, r.1)).collect(),
        no_copy_f1: runs[3].0,
        all_nodes: runs[4..7].iter().map(|r| r.0).collect(),
        oov_fraction,
    })
}

/// With mostly out-of-vocabulary targets the pointer is necessary: the full
/// model must clear the bar and the no-copy model must fall well short.
fn criterion_pointer_necessity(profile: &Profile, runs: &NamingRuns) -> CriterionResult {
    let (f1, secs) = runs.full[0];
    let gap = f1 - runs.no_copy_f1;
    let mut passed = true;
    if profile.enforce {
        passed = f1 >= 0.80 && secs <= 900.0 && runs.oov_fraction >= 0.5 && gap >= 0.15;
    }
    CriterionResult {
        index: 5,
        name: "pointer-necessity",
        passed,
        detail: format!(
            "full F1 {f1:.4} in {secs:.0}s (OOV targets {:.0}%), no-copy F1 {:.4}, gap {gap:.4}",
            runs.oov_fraction * 100.0,
            runs.no_copy_f1,
        ),
    }
}

/// Decoding over every node must not beat subtoken-node decoding.
fn criterion_decode_strategy(profile: &Profile, runs: &NamingRuns) -> CriterionResult {
    let not_better = runs
        .full
        .iter()
        .zip(&runs.all_nodes)
        .filter(|((full_f1, _), all_f1)| *all_f1 <= full_f1)
        .count();
    let full: Vec<f64> = runs.full.iter().map(|r| r.0).collect();
    CriterionResult {
        index: 6,
        name: "decode-strategy",
        passed: !profile.enforce || not_better >= 2,
        detail: format!(
            "all-node decoding {} vs subtoken decoding {}; not better on {not_better}/3 seeds",
            fmt_accs(&runs.all_nodes),
            fmt_accs(&full),
        ),
    }
}

// ---- criterion 7: metric oracle -----------------------------------------------------

/// The subtoken metric must reproduce its worked example bit-for-bit.
fn criterion_metric_oracle() -> CriterionResult {
    let predicted: Vec<String> = ["train", "model"].iter().map(|s| s.to_string()).collect();
    let target: Vec<String> =
        ["train", "graph", "model"].iter().map(|s| s.to_string()).collect();
    let (p, r, f1) = subtoken_prf(&predicted, &target);
    let passed =
        p == 1.0 && (r - 2.0 / 3.0).abs() <= 1e-9 && (f1 - 0.8).abs() <= 1e-9;
    CriterionResult {
        index: 7,
        name: "metric-oracle",
        passed,
        detail: format!("(precision, recall, F1) = ({p}, {r:.10}, {f1:.10}); expected (1, 0.6667, 0.8)"),
    }
}

// ---- criterion 8: numeric suite -----------------------------------------------------

/// A compact program exercising every constructor, operator, and comparison.
const NUMERIC_FIXTURE: &str = "def probe(alpha, beta):
    total = alpha + beta
    diff = total - alpha
    prod = total * diff
    ratio = prod / beta
    if alpha < beta:
        total = alpha
    else:
        total = beta
    while total > 0:
        total = total - 1
    for item in beta:
        diff = diff + item
    probe(alpha, beta)
    if alpha == beta:
        prod = 0
    if alpha != beta:
        prod = 1
    return ratio
";

/// Finite-difference agreement on every op and on the gradients of the full
/// encoder + pooling + classifier + decoder loss, plus attention rows that
/// sum to one.
fn criterion_numeric_suite(
    options: &SelftestOptions,
    profile: &Profile,
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
) -> Result<CriterionResult, SelftestError> {
    let started = Instant::now();

    let op_outcomes = run_op_suite(options.seed);
    let ops_ok = op_outcomes.iter().all(|o| o.ok);
    let ops_worst = op_outcomes.iter().map(|o| o.max_rel_diff).fold(0.0, f64::max);

    let (model_ok, model_worst, rows_ok, rows_worst) =
        full_model_check(options.seed, grammar, registries)?;

    let elapsed = started.elapsed().as_secs_f64();
    let mut passed = ops_ok && model_ok && rows_ok;
    if profile.enforce {
        passed &= elapsed < 120.0;
    }
    Ok(CriterionResult {
        index: 8,
        name: "numeric-suite",
        passed,
        detail: format!(
            "{} ops max rel {ops_worst:.2e}; full-model max rel {model_worst:.2e}; attention row sums within {rows_worst:.1e} of 1 ({elapsed:.0}s)",
            op_outcomes.len(),
        ),
    })
}

fn full_model_check(
    seed: u64,
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
) -> Result<(bool, f64, bool, f64), SelftestError> {
    let ast = parse_source(NUMERIC_FIXTURE, grammar)?;
    let hpg = build_graph_with(&ast, registries, &BuildOptions::default())?;
    let vocab = Vocab::new(&[UNK_TOKEN], hpg.nodes.iter().map(|n| n.value.clone()));
    let batch = BatchGraph::new(&[&hpg], &vocab);

    // Tiny widths keep the element count low enough for exhaustive central
    // differences while every parameter bank still participates.
    let encoder = HgtConfig {
        layers: 2,
        heads: 2,
        d_model: 4,
        ffn_width: 8,
        dropout: 0.0,
        vocab_size: vocab.len(),
    };
    let classifier = ClassifierConfig { hidden: vec![4], classes: 2 };
    let decoder = DecoderConfig {
        layers: 1,
        heads: 2,
        d_model: 4,
        ffn_width: 8,
        max_len: 4,
        dropout: 0.0,
        vocab: decoder_vocab(["alpha"]),
    };

    let mut rng = seeded_rng(seed, "init", 0);
    let mut store = crate::hgt::init_encoder_params(&encoder, registries, &mut rng)?;
    init_pool_params(&encoder, &mut rng, &mut store);
    init_classifier_params(&classifier, encoder.d_model, &mut rng, &mut store);
    init_decoder_params(&decoder, &mut rng, &mut store)?;

    // Target mixes an in-vocabulary subtoken with one reachable only through
    // the copy extension.
    let target: Vec<String> = ["alpha", "beta"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<usize> = batch.subtoken_rows[0].clone();
    let memory_values: Vec<String> =
        rows.iter().map(|&r| batch.node_values[r].clone()).collect();
    let input_ids = teacher_input_ids(&decoder.vocab, &target);

    let build = |g: &mut Graph, ids: &[TensorId]| -> Result<TensorId, NumericError> {
        let binding = store.bind_ids(ids);
        let mut rng = seeded_rng(0, "eval", 0);
        let states = encode(g, &binding, &batch, &encoder, registries, false, &mut rng)
            .expect("encoder forward");
        let pooled =
            global_attention_pool(g, &binding, states, &batch).expect("pooling forward");
        let logits = classify(g, &binding, &classifier, pooled).expect("classifier forward");
        let class_loss = g.cross_entropy_rows(logits, &[1])?;
        let memory = g.gather_rows(states, &rows)?;
        let output = decode_distributions(
            g, &binding, &decoder, memory, &memory_values, &input_ids, true, false, &mut rng,
        )
        .expect("decoder forward");
        let target_ids = extended_target_ids(&decoder.vocab, &output.extras, &target, true);
        let decode = decode_loss(g, &output, &target_ids).expect("decoder loss");
        g.add(class_loss, decode)
    };
    let outcome = check_scalar_fn("full-model", &store.tensors(), build);

    // Attention rows: per layer and head, incoming-edge weights for each
    // destination node must sum to one.
    let mut graph = Graph::new();
    let binding = store.bind_all(&mut graph);
    let mut trace_rng = seeded_rng(0, "eval", 0);
    let (_, trace) = encode_with_trace(
        &mut graph, &binding, &batch, &encoder, registries, false, &mut trace_rng,
    )?;
    let mut rows_worst: f64 = 0.0;
    for per_head in &trace.attention {
        for &weights in per_head {
            let w = graph.value(weights);
            let mut sums: HashMap<usize, f64> = HashMap::new();
            for (e, &dst) in batch.edge_dst.iter().enumerate() {
                *sums.entry(dst).or_insert(0.0) += w.data[e];
            }
            for (_, sum) in sums {
                rows_worst = rows_worst.max((sum - 1.0).abs());
            }
        }
    }
    let rows_ok = rows_worst <= 1e-6;

    Ok((outcome.ok, outcome.max_rel_diff, rows_ok, rows_worst))
}

// ---- criterion 9: graph invariants over random programs -----------------------------

/// Structural invariants of graph construction, checked over a stream of
/// randomly generated programs.
fn criterion_graph_invariants(
    options: &SelftestOptions,
    profile: &Profile,
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
) -> Result<CriterionResult, SelftestError> {
    let count = profile.programs;
    let failures = parallel(count, |i| {
        let mut rng = seeded_rng(options.seed, "random-programs", i as u64);
        let source = random_program(&mut rng);
        Ok(check_program_invariants(&source, grammar, registries)
            .err()
            .map(|why| format!("program {i}: {why}")))
    })?;
    let mut failed = 0;
    let mut first: Option<String> = None;
    for failure in failures.into_iter().flatten() {
        failed += 1;
        first.get_or_insert(failure);
    }
    let passed = failed == 0;
    Ok(CriterionResult {
        index: 9,
        name: "graph-invariants",
        passed,
        detail: match first {
            None => format!("{count} random programs, 5 invariants, 0 failures"),
            Some(first) => format!("{failed}/{count} programs failed; first: {first}"),
        },
    })
}

/// All five invariants for one program; returns a description of the first
/// violation.
fn check_program_invariants(
    source: &str,
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
) -> Result<(), String> {
    let ast = parse_source(source, grammar).map_err(|e| format!("parse: {e}"))?;

    // Invariant: grammar conformance.
    let diagnostics = validate_against_grammar(&ast, grammar);
    if !diagnostics.is_empty() {
        return Err(format!("validation: {}", diagnostics[0]));
    }

    let shared = build_graph_with(&ast, registries, &BuildOptions::default())
        .map_err(|e| format!("build: {e}"))?;
    let independent = build_graph_with(
        &ast,
        registries,
        &BuildOptions { scheme: SubtokenScheme::Independent, ..BuildOptions::default() },
    )
    .map_err(|e| format!("build independent: {e}"))?;

    check_reverse_matching(&shared, registries)?;
    check_next_token_path(&shared, registries)?;
    check_timestamps(&shared)?;

    // Invariant: sharing subtoken nodes can only shrink the graph.
    if shared.subtoken_node_count() > independent.subtoken_node_count() {
        return Err(format!(
            "shared scheme produced {} subtoken nodes, independent {}",
            shared.subtoken_node_count(),
            independent.subtoken_node_count()
        ));
    }
    Ok(())
}

/// Invariant: pairing each forward edge (s,t,f) with (t,s,rev(f)) is a
/// perfect matching over the edge multiset.
fn check_reverse_matching(graph: &Hpg, registries: &TypeRegistries) -> Result<(), String> {
    if graph.edges.len() % 2 != 0 {
        return Err(format!("odd edge count {}", graph.edges.len()));
    }
    let mut balance: HashMap<(usize, usize, usize), i64> = HashMap::new();
    let mut forward = 0i64;
    let mut reverse = 0i64;
    for edge in &graph.edges {
        if registries.is_forward(edge.type_id) {
            forward += 1;
            *balance.entry((edge.src, edge.dst, edge.type_id)).or_insert(0) += 1;
        } else {
            reverse += 1;
            let key = (edge.dst, edge.src, registries.reverse_of(edge.type_id));
            *balance.entry(key).or_insert(0) -= 1;
        }
    }
    if forward != reverse {
        return Err(format!("{forward} forward edges vs {reverse} reverse edges"));
    }
    if let Some((key, count)) = balance.iter().find(|(_, &c)| c != 0) {
        return Err(format!("edge {key:?} unmatched with balance {count}"));
    }
    Ok(())
}

/// Invariant: NextToken edges form a single path visiting every terminal
/// exactly once in source order.
fn check_next_token_path(graph: &Hpg, registries: &TypeRegistries) -> Result<(), String> {
    let next_token = registries
        .edge_id(crate::asdl::NEXT_TOKEN)
        .ok_or_else(|| "missing NextToken edge type".to_string())?;
    let terminals: Vec<usize> = (0..graph.ast_node_count)
        .filter(|&id| registries.is_primitive_node(graph.nodes[id].type_id))
        .collect();
    let chain: Vec<&crate::hpg::HpgEdge> =
        graph.edges.iter().filter(|e| e.type_id == next_token).collect();
    let expected = terminals.len().saturating_sub(1);
    if chain.len() != expected {
        return Err(format!(
            "{} NextToken edges for {} terminals (expected {expected})",
            chain.len(),
            terminals.len()
        ));
    }
    // Parser-produced trees list fields in source order, so pre-order node
    // ids are source order for terminals.
    for (pair, edge) in terminals.windows(2).zip(&chain) {
        if edge.src != pair[0] || edge.dst != pair[1] {
            return Err(format!(
                "NextToken edge {}→{} out of order (expected {}→{})",
                edge.src, edge.dst, pair[0], pair[1]
            ));
        }
    }
    Ok(())
}

/// Invariant: tree-node timestamps are a permutation of 0..A−1; subtoken
/// timestamps never collide with them.
fn check_timestamps(graph: &Hpg) -> Result<(), String> {
    let a = graph.ast_node_count;
    let mut seen = vec![false; a];
    for node in &graph.nodes[..a] {
        let t = node.timestamp as usize;
        if t >= a {
            return Err(format!("tree-node timestamp {t} outside 0..{a}"));
        }
        if seen[t] {
            return Err(format!("duplicate tree-node timestamp {t}"));
        }
        seen[t] = true;
    }
    for node in &graph.nodes[a..] {
        if (node.timestamp as usize) < a {
            return Err(format!(
                "subtoken timestamp {} collides with tree range 0..{a}",
                node.timestamp
            ));
        }
    }
    Ok(())
}

// ---- random program generator -------------------------------------------------------

const NAME_POOL: &[&str] = &[
    "alpha", "beta", "count", "total", "item", "value_sum", "get_next", "maxValue",
    "itemCount", "run_loop", "acc", "tmp", "left_part", "rightPart", "grand_total_sum",
];

fn pick_name(rng: &mut ChaCha20Rng) -> String {
    NAME_POOL.choose(rng).expect("non-empty pool").to_string()
}

fn random_expr(rng: &mut ChaCha20Rng, depth: usize) -> String {
    let leaf = depth >= 2 || rng.gen_bool(0.4);
    if leaf {
        if rng.gen_bool(0.5) {
            pick_name(rng)
        } else {
            rng.gen_range(0..100).to_string()
        }
    } else if rng.gen_bool(0.7) {
        let op = ["+", "-", "*", "/"].choose(rng).expect("ops");
        format!("{} {op} {}", random_expr(rng, depth + 1), random_expr(rng, depth + 1))
    } else {
        let args = match rng.gen_range(0..3) {
            0 => String::new(),
            1 => random_expr(rng, depth + 1),
            _ => format!("{}, {}", random_expr(rng, depth + 1), random_expr(rng, depth + 1)),
        };
        format!("{}({args})", pick_name(rng))
    }
}

fn random_test(rng: &mut ChaCha20Rng) -> String {
    let op = ["<", ">", "==", "!="].choose(rng).expect("cmps");
    format!("{} {op} {}", random_expr(rng, 2), random_expr(rng, 2))
}

fn random_block(rng: &mut ChaCha20Rng, indent: usize, depth: usize, out: &mut String) {
    let statements = rng.gen_range(1..=3);
    for _ in 0..statements {
        random_statement(rng, indent, depth, out);
    }
}

fn random_statement(rng: &mut ChaCha20Rng, indent: usize, depth: usize, out: &mut String) {
    let pad = "    ".repeat(indent);
    let kind = if depth >= 2 { rng.gen_range(0..3) } else { rng.gen_range(0..6) };
    match kind {
        0 | 1 => {
            let _ = writeln!(out, "{pad}{} = {}", pick_name(rng), random_expr(rng, 1));
        }
        2 => {
            let _ = writeln!(out, "{pad}{}", random_expr(rng, 1));
        }
        3 => {
            let _ = writeln!(out, "{pad}if {}:", random_test(rng));
            random_block(rng, indent + 1, depth + 1, out);
            if rng.gen_bool(0.5) {
                let _ = writeln!(out, "{pad}else:");
                random_block(rng, indent + 1, depth + 1, out);
            }
        }
        4 => {
            let _ = writeln!(out, "{pad}while {}:", random_test(rng));
            random_block(rng, indent + 1, depth + 1, out);
        }
        _ => {
            let _ = writeln!(out, "{pad}for {} in {}:", pick_name(rng), random_expr(rng, 1));
            random_block(rng, indent + 1, depth + 1, out);
        }
    }
}

/// Generate a random well-formed program: one or two functions, each with
/// random parameters and a statement body ending in a return.
fn random_program(rng: &mut ChaCha20Rng) -> String {
    let mut out = String::new();
    let functions = rng.gen_range(1..=2);
    for f in 0..functions {
        if f > 0 {
            out.push('\n');
        }
        let params = match rng.gen_range(0..3) {
            0 => String::new(),
            1 => pick_name(rng),
            _ => {
                let a = pick_name(rng);
                let mut b = pick_name(rng);
                while b == a {
                    b = pick_name(rng);
                }
                format!("{a}, {b}")
            }
        };
        let _ = writeln!(out, "def {}_{f}({params}):", pick_name(rng));
        random_block(rng, 1, 0, &mut out);
        let _ = writeln!(out, "    return {}", random_expr(rng, 1));
    }
    out
}

// ---- criterion 10: determinism ------------------------------------------------------

/// Re-derive the artifacts written earlier in this run — the twin graph dumps
/// and the typed operand-order metrics log — and require byte equality.
fn criterion_determinism(
    options: &SelftestOptions,
    profile: &Profile,
    registries: &TypeRegistries,
) -> Result<CriterionResult, SelftestError> {
    let corpus = gen_operand_order_corpus(options.seed, profile.twin_examples);
    let dumps = twin_dumps(&corpus, registries)?;
    let (typed_a, typed_b, erased_a, erased_b) =
        dumps.first().ok_or_else(|| SelftestError::Other("no twin pairs generated".into()))?;

    let mut mismatches: Vec<&str> = Vec::new();
    let mut compare = |name: &'static str, regenerated: &str| -> Result<(), SelftestError> {
        let path = options.out_dir.join(name);
        let on_disk = std::fs::read(&path)?;
        if on_disk != regenerated.as_bytes() {
            mismatches.push(name);
        }
        Ok(())
    };
    compare("twin-typed-a.hpg", typed_a)?;
    compare("twin-typed-b.hpg", typed_b)?;
    compare("twin-erased-a.hpg", erased_a)?;
    compare("twin-erased-b.hpg", erased_b)?;

    let train_corpus = gen_operand_order_corpus(options.seed, profile.operand_examples);
    let (_, metrics, _) = operand_run(
        &train_corpus,
        options.seed,
        profile.operand_epochs,
        AblationFlags::default(),
    )?;
    compare("operand-typed.metrics.jsonl", &metrics)?;

    let passed = mismatches.is_empty();
    Ok(CriterionResult {
        index: 10,
        name: "determinism",
        passed,
        detail: if passed {
            "regenerated twin dumps and training metrics are byte-identical".to_string()
        } else {
            format!("artifacts differ on regeneration: {mismatches:?}")
        },
    })
}
