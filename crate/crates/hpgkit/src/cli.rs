//! Command-line interface: grammar checks, parsing, graph building, corpus
//! statistics and generation, training, evaluation, prediction, and the
//! verification suites.
//!
//! Exit codes: 0 on success, 1 on a domain error (bad input file, failed
//! validation, training divergence, a failed verification suite), 2 on a
//! usage error (unknown flags, missing arguments, contradictory flags).
//! Every file output is written atomically (temp sibling, then rename).

use crate::asdl::{self, AsdlGrammar, TypeRegistries};
use crate::frontend::{export_ast, ingest_external_ast, parse_source, validate_against_grammar};
use crate::hpg::{
    build_graph_with, canonical_serialize, corpus_stats, erase_types, BuildOptions, CorpusStats,
    Hpg, SubtokenScheme,
};
use crate::numeric::{load_checkpoint, run_op_suite};
use crate::selftest::{run_selftest, SelftestOptions};
use crate::train::{
    evaluate_classification, evaluate_naming, gen_classification_corpus, gen_naming_corpus,
    gen_operand_order_corpus, metrics_jsonl, prepare_examples, train_classification, train_naming,
    AblationFlags, ClassifyBundle, Corpus, Example, NamingBundle, Split, Task, TrainConfig,
};
use crate::util::{worker_count, write_atomic};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Entry point: parse `argv`, run the command, map errors to exit codes.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("hpgkit: usage error: {message}");
            2
        }
        Err(CliError::Domain(message)) => {
            eprintln!("hpgkit: error: {message}");
            1
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Argument combinations clap cannot express (exit 2).
    Usage(String),
    /// Everything that went wrong while doing the work (exit 1).
    Domain(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "hpgkit",
    version,
    about = "Heterogeneous program graphs and typed graph-transformer training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a grammar file and report its types and constructors.
    GrammarCheck {
        /// Grammar file; the bundled MiniLang grammar when omitted.
        file: Option<PathBuf>,
    },
    /// Parse a source file, validate it, and emit the tree as JSON.
    Parse {
        file: PathBuf,
        /// Write the document here instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Lower source files (or exported `.json` trees) to canonical graph dumps.
    BuildGraph {
        /// Input files: `.mini` source or exported `.json` tree documents.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = SchemeArg::Shared)]
        scheme: SchemeArg,
        #[arg(long)]
        erase_node_types: bool,
        #[arg(long)]
        erase_edge_types: bool,
        #[arg(long = "no-nextsib")]
        no_nextsib: bool,
        #[arg(long = "no-nexttoken")]
        no_nexttoken: bool,
        /// Output path; only valid with a single input file.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Directory for outputs (default: next to each input).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Corpus statistics: per-split sizes, graph shape means, type histograms.
    Stats {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Shared)]
        scheme: SchemeArg,
        /// Also write the machine-readable record to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total example count (operand-order and naming tasks).
        #[arg(long)]
        n: Option<usize>,
        /// Examples per class (classification task).
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the 4-class structural classifier.
    TrainClassify(TrainArgs),
    /// Train the method namer.
    TrainName(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write per-example prediction records here (naming checkpoints).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run a checkpoint on source files and print its predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full verification suite and print one line per criterion.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shrink corpora and budgets for a fast smoke run; threshold
        /// criteria are reported but not enforced.
        #[arg(long)]
        quick: bool,
        /// Where metrics logs and graph dumps are written
        /// (default: ./selftest-out).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON training configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where the trained checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the metric history here as line-delimited JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    erase_node_types: bool,
    #[arg(long)]
    erase_edge_types: bool,
    #[arg(long = "no-nextsib")]
    no_nextsib: bool,
    #[arg(long = "no-nexttoken")]
    no_nexttoken: bool,
    #[arg(long)]
    decode_all_nodes: bool,
    #[arg(long)]
    no_copy: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    None,
    Shared,
    Independent,
}

impl From<SchemeArg> for SubtokenScheme {
    fn from(arg: SchemeArg) -> Self {
        match arg {
            SchemeArg::None => SubtokenScheme::None,
            SchemeArg::Shared => SubtokenScheme::Shared,
            SchemeArg::Independent => SubtokenScheme::Independent,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Operand,
    Naming,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(arg: SplitArg) -> Self {
        match arg {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GrammarCheck { file } => grammar_check(file.as_deref()),
        Command::Parse { file, output } => parse_command(&file, output.as_deref()),
        Command::BuildGraph {
            files,
            scheme,
            erase_node_types,
            erase_edge_types,
            no_nextsib,
            no_nexttoken,
            output,
            out_dir,
        } => build_graph_command(
            &files,
            scheme.into(),
            erase_node_types,
            erase_edge_types,
            no_nextsib,
            no_nexttoken,
            output.as_deref(),
            out_dir.as_deref(),
        ),
        Command::Stats { corpus, scheme, json } => {
            stats_command(&corpus, scheme.into(), json.as_deref())
        }
        Command::GenCorpus { task, seed, n, n_per_class, output } => {
            gen_corpus_command(task, seed, n, n_per_class, &output)
        }
        Command::TrainClassify(args) => train_command(args, Task::Classification),
        Command::TrainName(args) => train_command(args, Task::Naming),
        Command::Eval { checkpoint, corpus, split, predictions } => {
            eval_command(&checkpoint, &corpus, split.into(), predictions.as_deref())
        }
        Command::Predict { checkpoint, files } => predict_command(&checkpoint, &files),
        Command::Gradcheck { seed } => gradcheck_command(seed),
        Command::Selftest { seed, quick, out_dir } => {
            let options = SelftestOptions {
                seed,
                quick,
                out_dir: out_dir.unwrap_or_else(|| PathBuf::from("selftest-out")),
            };
            let report = run_selftest(&options).map_err(|e| CliError::Domain(e.to_string()))?;
            print!("{}", report.render());
            if report.all_passed() {
                Ok(())
            } else {
                Err(CliError::Domain("verification suite failed".into()))
            }
        }
    }
}

fn bundled_grammar() -> Result<AsdlGrammar, CliError> {
    Ok(asdl::parse(crate::MINILANG_GRAMMAR)?)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

/// Emit to a file (atomically) or standard output.
fn emit(output: Option<&Path>, content: &str) -> Result<(), CliError> {
    match output {
        Some(path) => {
            write_atomic(path, content.as_bytes())
                .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn grammar_check(file: Option<&Path>) -> Result<(), CliError> {
    let (name, text) = match file {
        Some(path) => (path.display().to_string(), read_file(path)?),
        None => ("bundled MiniLang grammar".to_string(), crate::MINILANG_GRAMMAR.to_string()),
    };
    let grammar = asdl::parse(&text)?;
    let registries = asdl::build_registries(&grammar);
    println!("{name}: OK");
    println!(
        "  composite types: {}, constructors: {}, primitive types: {}",
        grammar.composites.len(),
        grammar.constructor_count(),
        grammar.primitives.len(),
    );
    println!(
        "  node types: {}, edge types: {} ({} forward + reverse)",
        registries.node_types.len(),
        registries.edge_types.len(),
        registries.edge_types.len() / 2,
    );
    Ok(())
}

fn parse_command(file: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let grammar = bundled_grammar()?;
    let source = read_file(file)?;
    let ast = parse_source(&source, &grammar)?;
    let diagnostics = validate_against_grammar(&ast, &grammar);
    if !diagnostics.is_empty() {
        let mut message = format!("{}: tree fails validation:", file.display());
        for d in &diagnostics {
            let _ = write!(message, "\n  {d}");
        }
        return Err(CliError::Domain(message));
    }
    emit(output, &(export_ast(&ast) + "\n"))
}

/// Load one input as a typed tree. `.json` files are exported tree documents
/// and are trusted as-is — field-label order in a document is meaningful (it
/// is how operand-order twins are written down), so they skip the
/// order-sensitive validator; unknown types still fail during graph
/// construction. Everything else is parsed and validated as source text.
fn load_tree(path: &Path, grammar: &AsdlGrammar) -> Result<crate::frontend::TypedAstNode, CliError> {
    let text = read_file(path)?;
    let tree = if path.extension().is_some_and(|e| e == "json") {
        ingest_external_ast(&text, None)?
    } else {
        parse_source(&text, grammar)?
    };
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn build_graph_command(
    files: &[PathBuf],
    scheme: SubtokenScheme,
    erase_node_types: bool,
    erase_edge_types: bool,
    no_nextsib: bool,
    no_nexttoken: bool,
    output: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    if output.is_some() && files.len() > 1 {
        return Err(CliError::Usage(
            "-o/--output takes a single input file; use --out-dir for several".into(),
        ));
    }
    if output.is_some() && out_dir.is_some() {
        return Err(CliError::Usage("-o/--output and --out-dir are mutually exclusive".into()));
    }
    let grammar = bundled_grammar()?;
    let registries = asdl::build_registries(&grammar);
    let options =
        BuildOptions { scheme, next_sib: !no_nextsib, next_token: !no_nexttoken };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Domain(format!("{}: {e}", dir.display())))?;
    }

    let lower = |path: &PathBuf| -> Result<(), CliError> {
        let tree = load_tree(path, &grammar)?;
        let mut graph = build_graph_with(&tree, &registries, &options)?;
        if erase_node_types || erase_edge_types {
            graph = erase_types(graph, erase_node_types, erase_edge_types);
        }
        let target = match (output, out_dir) {
            (Some(out), _) => out.to_path_buf(),
            (None, Some(dir)) => dir.join(path.file_stem().unwrap_or_default()).with_extension("hpg"),
            (None, None) => path.with_extension("hpg"),
        };
        write_atomic(&target, canonical_serialize(&graph).as_bytes())
            .map_err(|e| CliError::Domain(format!("{}: {e}", target.display())))?;
        println!("wrote {}", target.display());
        Ok(())
    };

    let workers = worker_count(files.len());
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Domain(e.to_string()))?;
        let results: Vec<Result<(), CliError>> =
            pool.install(|| files.par_iter().map(lower).collect());
        for result in results {
            result?;
        }
    } else {
        for path in files {
            lower(path)?;
        }
    }
    Ok(())
}

fn corpus_graphs(
    examples: &[&Example],
    grammar: &AsdlGrammar,
    registries: &TypeRegistries,
    scheme: SubtokenScheme,
) -> Result<Vec<Hpg>, CliError> {
    let prepared = prepare_examples(
        examples,
        grammar,
        registries,
        scheme,
        AblationFlags::default(),
        Task::Classification,
    )
    .map_err(|e| CliError::Domain(e.to_string()))?;
    Ok(prepared.into_iter().map(|p| p.graph).collect())
}

fn stats_table(title: &str, stats: &CorpusStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "  graphs: {}", stats.graph_count);
    let _ = writeln!(
        out,
        "  nodes:  total {:>8}   mean {:>8.2}",
        stats.total_nodes, stats.mean_nodes
    );
    let _ = writeln!(
        out,
        "  edges:  total {:>8}   mean {:>8.2}",
        stats.total_edges, stats.mean_edges
    );
    let _ = writeln!(
        out,
        "  mean terminals {:.2}, mean subtoken nodes {:.2}",
        stats.mean_terminals, stats.mean_subtoken_nodes
    );
    let _ = writeln!(out, "  node types:");
    for (name, count) in &stats.node_type_histogram {
        let _ = writeln!(out, "    {name:<12} {count:>8}");
    }
    let _ = writeln!(out, "  edge types:");
    for (name, count) in &stats.edge_type_histogram {
        let _ = writeln!(out, "    {name:<12} {count:>8}");
    }
    out
}

fn stats_command(
    corpus_path: &Path,
    scheme: SubtokenScheme,
    json: Option<&Path>,
) -> Result<(), CliError> {
    let corpus =
        Corpus::load(corpus_path).map_err(|e| CliError::Domain(e.to_string()))?;
    let grammar = bundled_grammar()?;
    let registries = asdl::build_registries(&grammar);

    let mut record = serde_json::Map::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let members = corpus.split(split);
        if members.is_empty() {
            continue;
        }
        let graphs = corpus_graphs(&members, &grammar, &registries, scheme)?;
        let stats = corpus_stats(&graphs);
        let name = match split {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        print!("{}", stats_table(&format!("split {name}"), &stats));
        record.insert(name.to_string(), serde_json::to_value(&stats)?);
    }
    let machine = serde_json::Value::Object(record);
    match json {
        Some(path) => {
            write_atomic(path, (machine.to_string() + "\n").as_bytes())
                .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => println!("{machine}"),
    }
    Ok(())
}

fn gen_corpus_command(
    task: TaskArg,
    seed: u64,
    n: Option<usize>,
    n_per_class: Option<usize>,
    output: &Path,
) -> Result<(), CliError> {
    let corpus = match task {
        TaskArg::Classify => {
            let per_class = n_per_class.ok_or_else(|| {
                CliError::Usage("--task classify needs --n-per-class".into())
            })?;
            if n.is_some() {
                return Err(CliError::Usage(
                    "--task classify sizes with --n-per-class, not --n".into(),
                ));
            }
            gen_classification_corpus(seed, per_class)
        }
        TaskArg::Operand => {
            let total = n.ok_or_else(|| CliError::Usage("--task operand needs --n".into()))?;
            gen_operand_order_corpus(seed, total)
        }
        TaskArg::Naming => {
            let total = n.ok_or_else(|| CliError::Usage("--task naming needs --n".into()))?;
            gen_naming_corpus(seed, total)
        }
    };
    corpus.save(output).map_err(|e| CliError::Domain(e.to_string()))?;
    println!("wrote {} ({} examples)", output.display(), corpus.examples.len());
    Ok(())
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch_size) = args.batch_size {
        config.batch_size = batch_size;
    }
    if let Some(eval_interval) = args.eval_interval {
        config.eval_interval = eval_interval;
    }
    if let Some(scheme) = args.scheme {
        config.scheme = scheme.into();
    }
    // Flags only ever switch an ablation on; the config file can also set them.
    config.ablation.erase_node_types |= args.erase_node_types;
    config.ablation.erase_edge_types |= args.erase_edge_types;
    config.ablation.no_next_sib |= args.no_nextsib;
    config.ablation.no_next_token |= args.no_nexttoken;
    config.ablation.decode_all_nodes |= args.decode_all_nodes;
    config.ablation.no_copy |= args.no_copy;
    Ok(config)
}

fn print_history_tail(history: &[crate::train::MetricRecord]) {
    for record in history {
        println!(
            "step {:>6}  {:<5}  loss {:<10.6}  metric {:.4}",
            record.step,
            match record.split {
                Split::Train => "train",
                Split::Valid => "valid",
                Split::Test => "test",
            },
            record.loss,
            record.metric
        );
    }
}

fn train_command(args: TrainArgs, task: Task) -> Result<(), CliError> {
    let config = load_train_config(&args)?;
    let corpus = Corpus::load(&args.corpus).map_err(|e| CliError::Domain(e.to_string()))?;
    let (history, best, test) = match task {
        Task::Classification => {
            let outcome =
                train_classification(&corpus, &config).map_err(|e| CliError::Domain(e.to_string()))?;
            outcome.bundle.save(&args.checkpoint).map_err(|e| CliError::Domain(e.to_string()))?;
            (outcome.history, outcome.best_valid, outcome.test.map(|r| (r.loss, r.metric)))
        }
        Task::Naming => {
            let outcome =
                train_naming(&corpus, &config).map_err(|e| CliError::Domain(e.to_string()))?;
            outcome.bundle.save(&args.checkpoint).map_err(|e| CliError::Domain(e.to_string()))?;
            (outcome.history, outcome.best_valid, outcome.test.map(|r| (r.loss, r.metric)))
        }
    };
    if let Some(path) = &args.metrics {
        let text = metrics_jsonl(&history).map_err(|e| CliError::Domain(e.to_string()))?;
        write_atomic(path, text.as_bytes())
            .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    }
    print_history_tail(&history);
    if let Some(best) = best {
        println!("best validation: step {} loss {:.6} metric {:.4}", best.step, best.loss, best.metric);
    }
    if let Some((loss, metric)) = test {
        println!("test: loss {loss:.6} metric {metric:.4}");
    }
    println!("wrote {}", args.checkpoint.display());
    Ok(())
}

fn eval_command(
    checkpoint: &Path,
    corpus_path: &Path,
    split: Split,
    predictions: Option<&Path>,
) -> Result<(), CliError> {
    let corpus = Corpus::load(corpus_path).map_err(|e| CliError::Domain(e.to_string()))?;
    let members = corpus.split(split);
    if members.is_empty() {
        return Err(CliError::Domain(format!("corpus has no {split:?} examples")));
    }
    let grammar = bundled_grammar()?;
    let registries = asdl::build_registries(&grammar);
    let (meta, store) = load_checkpoint(checkpoint)?;
    let task = meta.get("task").and_then(|v| v.as_str()).unwrap_or("").to_string();
    let mut class_predictions: Option<String> = None;
    let report = match task.as_str() {
        "classification" => {
            let bundle = ClassifyBundle::from_parts(&meta, store)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            let prepared = prepare_examples(
                &members, &grammar, &registries, bundle.scheme, bundle.ablation,
                Task::Classification,
            )
            .map_err(|e| CliError::Domain(e.to_string()))?;
            if predictions.is_some() {
                let mut text = String::new();
                for example in &prepared {
                    let class = classify_one(&bundle, example, &registries)?;
                    let record = serde_json::json!({
                        "id": example.id,
                        "predicted": class,
                        "label": example.label,
                    });
                    text.push_str(&record.to_string());
                    text.push('\n');
                }
                class_predictions = Some(text);
            }
            evaluate_classification(&bundle, &prepared, &registries)
                .map_err(|e| CliError::Domain(e.to_string()))?
        }
        "naming" => {
            let bundle = NamingBundle::from_parts(&meta, store)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            let prepared = prepare_examples(
                &members, &grammar, &registries, bundle.scheme, bundle.ablation, Task::Naming,
            )
            .map_err(|e| CliError::Domain(e.to_string()))?;
            evaluate_naming(&bundle, &prepared, &registries)
                .map_err(|e| CliError::Domain(e.to_string()))?
        }
        other => {
            return Err(CliError::Domain(format!(
                "checkpoint task `{other}` is not evaluable"
            )))
        }
    };
    println!("examples: {}", members.len());
    println!("loss: {:.6}", report.loss);
    println!("metric: {:.4}", report.metric);
    if let Some(path) = predictions {
        let (text, count) = match class_predictions {
            Some(text) => {
                let count = text.lines().count();
                (text, count)
            }
            None => {
                let mut text = String::new();
                for record in &report.predictions {
                    text.push_str(&serde_json::to_string(record)?);
                    text.push('\n');
                }
                (text, report.predictions.len())
            }
        };
        write_atomic(path, text.as_bytes())
            .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
        println!("wrote {} ({count} records)", path.display());
    }
    Ok(())
}

fn predict_command(checkpoint: &Path, files: &[PathBuf]) -> Result<(), CliError> {
    let grammar = bundled_grammar()?;
    let registries = asdl::build_registries(&grammar);
    let (meta, store) = load_checkpoint(checkpoint)?;
    let task = meta.get("task").and_then(|v| v.as_str()).unwrap_or("").to_string();
    for path in files {
        let example = Example {
            id: path.display().to_string(),
            source: if path.extension().is_some_and(|e| e == "json") {
                None
            } else {
                Some(read_file(path)?)
            },
            ast: if path.extension().is_some_and(|e| e == "json") {
                Some(serde_json::from_str(&read_file(path)?)?)
            } else {
                None
            },
            label: None,
            target_subtokens: None,
            split: Split::Test,
        };
        match task.as_str() {
            "classification" => {
                let bundle = ClassifyBundle::from_parts(&meta, store.clone())
                    .map_err(|e| CliError::Domain(e.to_string()))?;
                let prepared = prepare_examples(
                    &[&example], &grammar, &registries, bundle.scheme, bundle.ablation,
                    Task::Classification,
                )
                .map_err(|e| CliError::Domain(e.to_string()))?;
                let class = classify_one(&bundle, &prepared[0], &registries)?;
                println!("{}: class {class}", path.display());
            }
            "naming" => {
                let bundle = NamingBundle::from_parts(&meta, store.clone())
                    .map_err(|e| CliError::Domain(e.to_string()))?;
                let prepared = prepare_examples(
                    &[&example], &grammar, &registries, bundle.scheme, bundle.ablation,
                    Task::Naming,
                )
                .map_err(|e| CliError::Domain(e.to_string()))?;
                let name = name_one(&bundle, &prepared[0], &registries)?;
                println!("{}: {}", path.display(), name);
            }
            other => {
                return Err(CliError::Domain(format!(
                    "checkpoint task `{other}` cannot predict"
                )))
            }
        }
    }
    Ok(())
}

fn classify_one(
    bundle: &ClassifyBundle,
    prepared: &crate::train::PreparedExample,
    registries: &TypeRegistries,
) -> Result<usize, CliError> {
    use crate::hgt::BatchGraph;
    use crate::numeric::Graph;
    let mut graph = Graph::new();
    let binding = bundle.store.bind_all(&mut graph);
    let batch = BatchGraph::new(&[&prepared.graph], &bundle.vocab);
    let mut rng = crate::util::seeded_rng(0, "eval", 0);
    let states = crate::hgt::encode(
        &mut graph, &binding, &batch, &bundle.encoder, registries, false, &mut rng,
    )
    .map_err(|e| CliError::Domain(e.to_string()))?;
    let pooled = crate::hgt::global_attention_pool(&mut graph, &binding, states, &batch)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    let logits = crate::heads::classify(&mut graph, &binding, &bundle.classifier, pooled)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    Ok(crate::heads::argmax_rows(graph.value(logits))[0])
}

fn name_one(
    bundle: &NamingBundle,
    prepared: &crate::train::PreparedExample,
    registries: &TypeRegistries,
) -> Result<String, CliError> {
    let mut targeted = prepared.clone();
    if targeted.target.is_none() {
        targeted.target = Some(Vec::new());
    }
    let report = evaluate_naming(bundle, std::slice::from_ref(&targeted), registries)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    let words = &report.predictions[0].predicted;
    if words.is_empty() {
        Ok("(empty prediction)".into())
    } else {
        Ok(words.join("_"))
    }
}

fn gradcheck_command(seed: u64) -> Result<(), CliError> {
    let outcomes = run_op_suite(seed);
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for outcome in &outcomes {
        let status = if outcome.ok { "ok " } else { "FAIL" };
        println!(
            "{status} {:<22} max rel {:.3e}  max abs {:.3e}  ({} elements)",
            outcome.name, outcome.max_rel_diff, outcome.max_abs_diff, outcome.elements
        );
        worst = worst.max(outcome.max_rel_diff);
        if !outcome.ok {
            failed += 1;
        }
    }
    println!("checked {} operations; max relative error {worst:.3e}", outcomes.len());
    if failed > 0 {
        return Err(CliError::Domain(format!("{failed} operations failed the gradient check")));
    }
    Ok(())
}
