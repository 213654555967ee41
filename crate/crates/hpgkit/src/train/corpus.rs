//! Example records, line-delimited corpus files, and the synthetic corpus
//! generators behind the trained experiments.
//!
//! All three generators are deterministic functions of their seed: each
//! example draws from an RNG stream derived from (seed, generator, index),
//! so inserting or removing one example never reshuffles the others.

use super::TrainError;
use crate::frontend::{ast_to_document, parse_source, AstDocument, TypedAstNode};
use crate::hpg::split_subtokens;
use crate::util::seeded_rng;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Generation vocabulary of the naming corpus: everything else in a target
/// must be copied out of the function body.
pub const NAMING_TEMPLATE_WORDS: [&str; 5] = ["get", "add", "set", "max", "loop"];

const KEYWORDS: [&str; 7] = ["def", "return", "if", "else", "while", "for", "in"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One corpus record: a program (as source text or an exported tree) plus
/// its class label or target subtokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ast: Option<AstDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_subtokens: Option<Vec<String>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for example in &self.examples {
            out.push_str(&serde_json::to_string(example)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Corpus, TrainError> {
        let mut examples = Vec::new();
        let mut seen = HashSet::new();
        for (ix, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let example: Example = serde_json::from_str(line)
                .map_err(|e| TrainError::Corpus(format!("line {}: {e}", ix + 1)))?;
            if !seen.insert(example.id.clone()) {
                return Err(TrainError::Corpus(format!(
                    "line {}: duplicate example id `{}`",
                    ix + 1,
                    example.id
                )));
            }
            examples.push(example);
        }
        Ok(Corpus { examples })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        crate::util::write_atomic(path, self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus, TrainError> {
        Corpus::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// 70/15/15 split cycle, stable in the example index.
fn split_for(ix: usize) -> Split {
    match ix % 20 {
        0..=13 => Split::Train,
        14..=16 => Split::Valid,
        _ => Split::Test,
    }
}

/// Random lowercase identifier, avoiding keywords and the given names.
fn fresh_identifier(rng: &mut ChaCha20Rng, avoid: &[&str]) -> String {
    loop {
        let len = rng.gen_range(3..=7);
        let name: String = (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
        if !KEYWORDS.contains(&name.as_str()) && !avoid.contains(&name.as_str()) {
            return name;
        }
    }
}

// ---- 4-class structural classification ---------------------------------------

/// Four structurally distinct program shapes with randomized identifiers and
/// constants: straight-line arithmetic, a single loop, nested loops, and a
/// conditional with an else branch. Class balance is exact overall and within
/// every split.
pub fn gen_classification_corpus(seed: u64, n_per_class: usize) -> Corpus {
    let mut examples = Vec::with_capacity(4 * n_per_class);
    for class in 0..4 {
        for i in 0..n_per_class {
            let mut rng =
                seeded_rng(seed, "classify-corpus", (class * n_per_class + i) as u64);
            let source = classification_program(class, &mut rng);
            examples.push(Example {
                id: format!("cls-{class}-{i}"),
                source: Some(source),
                ast: None,
                label: Some(class),
                target_subtokens: None,
                split: split_for(i),
            });
        }
    }
    Corpus { examples }
}

fn classification_program(class: usize, rng: &mut ChaCha20Rng) -> String {
    let a = fresh_identifier(rng, &[]);
    let b = fresh_identifier(rng, &[&a]);
    let c = fresh_identifier(rng, &[&a, &b]);
    let k1 = rng.gen_range(1..=9);
    let k2 = rng.gen_range(10..=99);
    let k3 = rng.gen_range(1..=9);
    let mut lines: Vec<String> = Vec::new();
    match class {
        0 => {
            lines.push(format!("{a} = {k1}"));
            lines.push(format!("{b} = {a} + {k2}"));
            lines.push(format!("{c} = {b} * {a}"));
            if rng.gen_bool(0.5) {
                lines.push(format!("{a} = {c} - {k3}"));
            }
        }
        1 => {
            lines.push(format!("{a} = {k1}"));
            if rng.gen_bool(0.5) {
                lines.push(format!("while {a} < {k2}:"));
                lines.push(format!("    {a} = {a} + {k3}"));
            } else {
                lines.push(format!("for {b} in {c}:"));
                lines.push(format!("    {a} = {a} + {b}"));
            }
        }
        2 => {
            lines.push(format!("{a} = {k1}"));
            lines.push(format!("{b} = {k2}"));
            if rng.gen_bool(0.5) {
                lines.push(format!("while {b} > 0:"));
                lines.push(format!("    {c} = {k3}"));
                lines.push(format!("    while {c} > 0:"));
                lines.push(format!("        {c} = {c} - 1"));
                lines.push(format!("    {b} = {b} - 1"));
            } else {
                lines.push(format!("for {c} in {a}:"));
                lines.push(format!("    while {b} > 0:"));
                lines.push(format!("        {b} = {b} - 1"));
            }
        }
        _ => {
            lines.push(format!("{a} = {k1}"));
            lines.push(format!("{b} = {k2}"));
            lines.push(format!("if {a} < {b}:"));
            lines.push(format!("    {c} = {a} + {k3}"));
            lines.push("else:".to_string());
            lines.push(format!("    {c} = {b} - {k3}"));
        }
    }
    if rng.gen_bool(0.5) {
        lines.push(format!("{b} = {a} * {k3}"));
    }
    lines.join("\n") + "\n"
}

// ---- operand-order twins -----------------------------------------------------

/// Binary corpus of twin pairs: both members share identifiers and child
/// order; only the operand role labels differ (`x − y` vs `y − x`). With
/// types erased the two trees lower to byte-identical graph dumps, so any
/// untyped model is structurally blind to the label. Odd `n` rounds down to
/// complete pairs; both members of a pair land in the same split.
pub fn gen_operand_order_corpus(seed: u64, n: usize) -> Corpus {
    let pairs = n / 2;
    let grammar = crate::asdl::parse(crate::MINILANG_GRAMMAR).expect("bundled grammar");
    let mut examples = Vec::with_capacity(pairs * 2);
    for k in 0..pairs {
        let mut rng = seeded_rng(seed, "operand-corpus", k as u64);
        let f = fresh_identifier(&mut rng, &[]);
        let x = fresh_identifier(&mut rng, &[&f]);
        let y = fresh_identifier(&mut rng, &[&f, &x]);
        let r = fresh_identifier(&mut rng, &[&f, &x, &y]);
        let source =
            format!("def {f}({x}, {y}):\n    {r} = {x} - {y}\n    return {r}\n");
        let base = parse_source(&source, &grammar).expect("template always parses");
        let mut swapped = base.clone();
        swap_operand_labels(&mut swapped);
        let split = split_for(k);
        examples.push(Example {
            id: format!("ord-{k}-0"),
            source: None,
            ast: Some(ast_to_document(&base)),
            label: Some(0),
            target_subtokens: None,
            split,
        });
        examples.push(Example {
            id: format!("ord-{k}-1"),
            source: None,
            ast: Some(ast_to_document(&swapped)),
            label: Some(1),
            target_subtokens: None,
            split,
        });
    }
    Corpus { examples }
}

/// Swap the `left`/`right` labels on every binary operation in place,
/// keeping child order — the typed trees differ, the erased graphs do not.
fn swap_operand_labels(node: &mut TypedAstNode) {
    if node.value == "BinOp" {
        for child in &mut node.children {
            child.label = match child.label.as_str() {
                "left" => "right".to_string(),
                "right" => "left".to_string(),
                other => other.to_string(),
            };
        }
    }
    for child in &mut node.children {
        swap_operand_labels(&mut child.node);
    }
}

// ---- method naming -----------------------------------------------------------

/// Templated functions whose name is derivable from the body: `get_x`,
/// `add_x_y`, `set_x`, `max_x_y`, `loop_x`, cycling through the five
/// templates. The non-template name parts are fresh random identifiers, so
/// they are out of any fixed generation vocabulary and must be copied from
/// the body, where each one appears as a parameter or local.
pub fn gen_naming_corpus(seed: u64, n: usize) -> Corpus {
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeded_rng(seed, "naming-corpus", i as u64);
        let template = NAMING_TEMPLATE_WORDS[i % NAMING_TEMPLATE_WORDS.len()];
        let mut avoid: Vec<&str> = KEYWORDS.to_vec();
        avoid.extend(NAMING_TEMPLATE_WORDS);
        avoid.push("value");
        let x = fresh_identifier(&mut rng, &avoid);
        let avoid_y: Vec<&str> = avoid.iter().copied().chain([x.as_str()]).collect();
        let y = fresh_identifier(&mut rng, &avoid_y);
        let (name, source) = match template {
            "get" => (format!("get_{x}"), format!("def get_{x}({x}):\n    return {x}\n")),
            "add" => (
                format!("add_{x}_{y}"),
                format!("def add_{x}_{y}({x}, {y}):\n    return {x} + {y}\n"),
            ),
            "set" => (
                format!("set_{x}"),
                format!("def set_{x}({x}, value):\n    {x} = value\n    return {x}\n"),
            ),
            "max" => (
                format!("max_{x}_{y}"),
                format!(
                    "def max_{x}_{y}({x}, {y}):\n    if {x} > {y}:\n        return {x}\n    else:\n        return {y}\n"
                ),
            ),
            _ => (
                format!("loop_{x}"),
                format!(
                    "def loop_{x}({x}):\n    while {x} > 0:\n        {x} = {x} - 1\n    return {x}\n"
                ),
            ),
        };
        examples.push(Example {
            id: format!("name-{template}-{i}"),
            source: Some(source),
            ast: None,
            label: None,
            target_subtokens: Some(split_subtokens(&name)),
            split: split_for(i),
        });
    }
    Corpus { examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asdl::{self, build_registries};
    use crate::frontend::{document_to_ast, validate_against_grammar};
    use crate::hpg::{build_graph, canonical_serialize, erase_types, SubtokenScheme};
    use crate::MINILANG_GRAMMAR;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_classification_corpus(9, 6).to_jsonl().unwrap(),
            gen_classification_corpus(9, 6).to_jsonl().unwrap()
        );
        assert_eq!(
            gen_operand_order_corpus(9, 10).to_jsonl().unwrap(),
            gen_operand_order_corpus(9, 10).to_jsonl().unwrap()
        );
        assert_eq!(
            gen_naming_corpus(9, 10).to_jsonl().unwrap(),
            gen_naming_corpus(9, 10).to_jsonl().unwrap()
        );
        // A different seed actually changes the programs.
        assert_ne!(
            gen_classification_corpus(9, 6).to_jsonl().unwrap(),
            gen_classification_corpus(10, 6).to_jsonl().unwrap()
        );
    }

    #[test]
    fn classification_programs_parse_validate_and_balance() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let corpus = gen_classification_corpus(3, 20);
        assert_eq!(corpus.examples.len(), 80);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let members = corpus.split(split);
            for class in 0..4 {
                let class_members =
                    members.iter().filter(|e| e.label == Some(class)).count();
                assert_eq!(class_members, members.len() / 4, "split {split:?} class {class}");
            }
        }
        for example in &corpus.examples {
            let ast = parse_source(example.source.as_ref().unwrap(), &grammar).unwrap();
            let diags = validate_against_grammar(&ast, &grammar);
            assert!(diags.is_empty(), "{}: {diags:?}", example.id);
        }
    }

    #[test]
    fn operand_twins_erase_identically_but_differ_typed() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let registries = build_registries(&grammar);
        let corpus = gen_operand_order_corpus(4, 12);
        assert_eq!(corpus.examples.len(), 12);
        assert_eq!(corpus.examples.iter().filter(|e| e.label == Some(0)).count(), 6);
        for pair in corpus.examples.chunks(2) {
            assert_eq!(pair[0].split, pair[1].split);
            let lower = |e: &Example| {
                let ast = document_to_ast(e.ast.as_ref().unwrap());
                build_graph(&ast, &registries, SubtokenScheme::Shared).unwrap()
            };
            let (g0, g1) = (lower(&pair[0]), lower(&pair[1]));
            assert_ne!(canonical_serialize(&g0), canonical_serialize(&g1));
            let e0 = erase_types(g0, true, true);
            let e1 = erase_types(g1, true, true);
            assert_eq!(canonical_serialize(&e0), canonical_serialize(&e1));
        }
        // The label-0 member is fully grammar-conformant.
        let base = document_to_ast(corpus.examples[0].ast.as_ref().unwrap());
        assert!(validate_against_grammar(&base, &grammar).is_empty());
    }

    #[test]
    fn naming_targets_are_recoverable_and_mostly_out_of_vocabulary() {
        let grammar = asdl::parse(MINILANG_GRAMMAR).unwrap();
        let corpus = gen_naming_corpus(5, 50);
        let mut oov = 0usize;
        let mut total = 0usize;
        for example in &corpus.examples {
            let source = example.source.as_ref().unwrap();
            let ast = parse_source(source, &grammar).unwrap();
            assert!(validate_against_grammar(&ast, &grammar).is_empty());
            // Subtokens available in the body: every identifier terminal
            // except the definition's own name.
            let mut body_parts: HashSet<String> = HashSet::new();
            let name = fn_name(&ast);
            ast.walk(&mut |node| {
                if node.node_type == "identifier" && node.value != name {
                    body_parts.extend(split_subtokens(&node.value));
                }
            });
            for part in example.target_subtokens.as_ref().unwrap() {
                total += 1;
                let in_vocab = NAMING_TEMPLATE_WORDS.contains(&part.as_str());
                if !in_vocab {
                    oov += 1;
                }
                assert!(
                    in_vocab || body_parts.contains(part),
                    "{}: `{part}` neither in the template vocabulary nor the body",
                    example.id
                );
            }
        }
        let fraction = oov as f64 / total as f64;
        assert!(fraction >= 0.5, "out-of-vocabulary fraction {fraction}");
    }

    fn fn_name(ast: &TypedAstNode) -> String {
        let def = ast
            .children
            .iter()
            .map(|c| &c.node)
            .find(|n| n.value == "FunctionDef")
            .expect("one function per naming example");
        def.children
            .iter()
            .find(|c| c.label == "name")
            .map(|c| c.node.value.clone())
            .expect("functions are named")
    }

    #[test]
    fn jsonl_round_trips() {
        let corpus = gen_naming_corpus(11, 7);
        let text = corpus.to_jsonl().unwrap();
        let back = Corpus::from_jsonl(&text).unwrap();
        assert_eq!(corpus, back);

        let ast_corpus = gen_operand_order_corpus(11, 6);
        let text = ast_corpus.to_jsonl().unwrap();
        assert_eq!(Corpus::from_jsonl(&text).unwrap(), ast_corpus);
    }

    #[test]
    fn duplicate_ids_and_malformed_lines_are_rejected() {
        let mut corpus = gen_naming_corpus(2, 2);
        corpus.examples[1].id = corpus.examples[0].id.clone();
        let text = corpus.to_jsonl().unwrap();
        let err = Corpus::from_jsonl(&text).unwrap_err();
        assert!(matches!(err, TrainError::Corpus(ref m) if m.contains("duplicate")));

        let err = Corpus::from_jsonl("{\"id\": 42}\n").unwrap_err();
        assert!(matches!(err, TrainError::Corpus(ref m) if m.contains("line 1")));
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_corpus() {
        let corpus = gen_classification_corpus(1, 25);
        let train = corpus.split(Split::Train).len();
        let valid = corpus.split(Split::Valid).len();
        let test = corpus.split(Split::Test).len();
        assert_eq!(train + valid + test, corpus.examples.len());
        assert!(train > valid && train > test);
        assert!(valid > 0 && test > 0);
    }
}
