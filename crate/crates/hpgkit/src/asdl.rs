//! ASDL grammar parsing, validation and type registries.
//!
//! A grammar file defines composite types as alternations of constructors
//! with labeled, qualified fields, plus a `%primitive` pragma naming the
//! terminal types. The derived [`TypeRegistries`] assign dense ids to node
//! types (composites, then primitives, then the synthetic subtoken type) and
//! to edge types (field labels in first-appearance order, then the crafted
//! edges, then one reverse per forward edge).

use crate::diag::{has_errors, Diagnostic, Pos, Span};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Node type used for subtoken nodes added during graph construction.
pub const SUBTOKEN_TYPE: &str = "subtoken";
/// Crafted edge between adjacent children of one parent.
pub const NEXT_SIB: &str = "NextSib";
/// Crafted edge between consecutive terminals in source order.
pub const NEXT_TOKEN: &str = "NextToken";
/// Crafted edge from a subtoken node to the identifier it came from.
pub const SUBTOKEN_OF: &str = "subtoken_of";
/// Reverse of [`NEXT_TOKEN`]; the one reverse edge with its own name.
pub const LAST_TOKEN: &str = "LastToken";
/// Suffix appended to a forward edge name to form its reverse name.
pub const REVERSE_SUFFIX: &str = "_reverse";

#[derive(Debug, Error)]
pub enum AsdlError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: Pos, message: String },
    #[error("grammar defines no productions")]
    NoProductions,
    #[error("invalid grammar: {0}")]
    Invalid(String),
}

/// Field multiplicity. `Optional` admits zero or one child, `Sequence` any
/// number in source order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Qualifier {
    Single,
    Optional,
    Sequence,
}

impl Qualifier {
    pub fn symbol(&self) -> &'static str {
        match self {
            Qualifier::Single => "",
            Qualifier::Optional => "?",
            Qualifier::Sequence => "*",
        }
    }

    /// Whether `count` children are admissible under this qualifier.
    pub fn admits(&self, count: usize) -> bool {
        match self {
            Qualifier::Single => count == 1,
            Qualifier::Optional => count <= 1,
            Qualifier::Sequence => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub type_name: String,
    pub qualifier: Qualifier,
    pub label: String,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{} {}", self.type_name, self.qualifier.symbol(), self.label)
    }
}

#[derive(Debug, Clone, Eq, Serialize, Deserialize)]
pub struct Constructor {
    pub name: String,
    pub fields: Vec<Field>,
    /// True for the anonymous product form `type = (fields)`, whose
    /// constructor is registered under the type's own name.
    pub anonymous: bool,
    pub span: Span,
}

// Spans locate a constructor in its source text for diagnostics; two
// constructors parsed from differently formatted text are still equal.
impl PartialEq for Constructor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.fields == other.fields
            && self.anonymous == other.anonymous
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsdlGrammar {
    /// Composite types in declaration order, each with its constructors.
    pub composites: IndexMap<String, Vec<Constructor>>,
    /// Primitive (terminal) type names in pragma order.
    pub primitives: Vec<String>,
}

impl AsdlGrammar {
    pub fn is_primitive(&self, type_name: &str) -> bool {
        self.primitives.iter().any(|p| p == type_name)
    }

    pub fn is_composite(&self, type_name: &str) -> bool {
        self.composites.contains_key(type_name)
    }

    /// Look up a constructor by name together with its owning type.
    pub fn constructor(&self, name: &str) -> Option<(&str, &Constructor)> {
        for (ty, ctors) in &self.composites {
            for c in ctors {
                if c.name == name {
                    return Some((ty.as_str(), c));
                }
            }
        }
        None
    }

    pub fn constructor_count(&self) -> usize {
        self.composites.values().map(Vec::len).sum()
    }

    /// Render the grammar back to source text. Reparsing the output yields a
    /// structurally equal grammar.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.primitives.is_empty() {
            out.push_str("%primitive");
            for p in &self.primitives {
                out.push(' ');
                out.push_str(p);
            }
            out.push_str("\n\n");
        }
        for (ty, ctors) in &self.composites {
            let mut line = format!("{ty} = ");
            for (i, c) in ctors.iter().enumerate() {
                if i > 0 {
                    line.push_str(" | ");
                }
                if c.anonymous {
                    line.push('(');
                } else {
                    line.push_str(&c.name);
                    if !c.fields.is_empty() {
                        line.push('(');
                    }
                }
                for (j, field) in c.fields.iter().enumerate() {
                    if j > 0 {
                        line.push_str(", ");
                    }
                    line.push_str(&field.to_string());
                }
                if c.anonymous || !c.fields.is_empty() {
                    line.push(')');
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Pragma(String),
    Eq,
    Pipe,
    LParen,
    RParen,
    Comma,
    Star,
    Question,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: Pos,
}

fn lex(text: &str) -> Result<Vec<Spanned>, AsdlError> {
    let mut out = Vec::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find("--") {
            Some(ix) => &raw_line[..ix],
            None => raw_line,
        };
        let mut chars = line.char_indices().peekable();
        while let Some(&(ix, ch)) = chars.peek() {
            let pos = Pos::new(lineno as u32 + 1, ix as u32 + 1);
            match ch {
                c if c.is_whitespace() => {
                    chars.next();
                }
                '%' => {
                    chars.next();
                    let mut word = String::new();
                    while let Some(&(_, c)) = chars.peek() {
                        if c.is_alphanumeric() || c == '_' {
                            word.push(c);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    if word.is_empty() {
                        return Err(AsdlError::Syntax {
                            pos,
                            message: "expected pragma name after '%'".into(),
                        });
                    }
                    out.push(Spanned { tok: Tok::Pragma(word), pos });
                }
                c if c.is_alphabetic() || c == '_' => {
                    let mut word = String::new();
                    while let Some(&(_, c)) = chars.peek() {
                        if c.is_alphanumeric() || c == '_' {
                            word.push(c);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    out.push(Spanned { tok: Tok::Ident(word), pos });
                }
                '=' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::Eq, pos });
                }
                '|' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::Pipe, pos });
                }
                '(' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::LParen, pos });
                }
                ')' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::RParen, pos });
                }
                ',' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::Comma, pos });
                }
                '*' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::Star, pos });
                }
                '?' => {
                    chars.next();
                    out.push(Spanned { tok: Tok::Question, pos });
                }
                other => {
                    return Err(AsdlError::Syntax {
                        pos,
                        message: format!("unexpected character {other:?}"),
                    });
                }
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    ix: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.ix)
    }

    fn peek2(&self) -> Option<&Spanned> {
        self.toks.get(self.ix + 1)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.ix).cloned();
        if t.is_some() {
            self.ix += 1;
        }
        t
    }

    fn pos(&self) -> Pos {
        self.peek()
            .map(|s| s.pos)
            .or_else(|| self.toks.last().map(|s| s.pos))
            .unwrap_or(Pos::new(1, 1))
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<Spanned, AsdlError> {
        match self.next() {
            Some(s) if &s.tok == want => Ok(s),
            Some(s) => Err(AsdlError::Syntax {
                pos: s.pos,
                message: format!("expected {what}, found {:?}", s.tok),
            }),
            None => Err(AsdlError::Syntax {
                pos: self.pos(),
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), AsdlError> {
        match self.next() {
            Some(Spanned { tok: Tok::Ident(name), pos }) => Ok((name, pos)),
            Some(s) => Err(AsdlError::Syntax {
                pos: s.pos,
                message: format!("expected {what}, found {:?}", s.tok),
            }),
            None => Err(AsdlError::Syntax {
                pos: self.pos(),
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn fields(&mut self) -> Result<Vec<Field>, AsdlError> {
        // Caller consumed '('. An empty field list `()` is permitted.
        let mut fields = Vec::new();
        if matches!(self.peek(), Some(Spanned { tok: Tok::RParen, .. })) {
            self.next();
            return Ok(fields);
        }
        loop {
            let (type_name, _) = self.ident("field type name")?;
            let qualifier = match self.peek() {
                Some(Spanned { tok: Tok::Star, .. }) => {
                    self.next();
                    Qualifier::Sequence
                }
                Some(Spanned { tok: Tok::Question, .. }) => {
                    self.next();
                    Qualifier::Optional
                }
                _ => Qualifier::Single,
            };
            let (label, _) = self.ident("field label")?;
            fields.push(Field { type_name, qualifier, label });
            match self.next() {
                Some(Spanned { tok: Tok::Comma, .. }) => continue,
                Some(Spanned { tok: Tok::RParen, .. }) => break,
                Some(s) => {
                    return Err(AsdlError::Syntax {
                        pos: s.pos,
                        message: format!("expected ',' or ')', found {:?}", s.tok),
                    })
                }
                None => {
                    return Err(AsdlError::Syntax {
                        pos: self.pos(),
                        message: "unclosed field list".into(),
                    })
                }
            }
        }
        Ok(fields)
    }

    /// One alternative of a production: `Ctor(fields)`, bare `Ctor`, or the
    /// anonymous `(fields)` form named after the owning type.
    fn alternative(&mut self, owner: &str) -> Result<Constructor, AsdlError> {
        match self.peek().cloned() {
            Some(Spanned { tok: Tok::LParen, pos }) => {
                self.next();
                let fields = self.fields()?;
                Ok(Constructor {
                    name: owner.to_string(),
                    fields,
                    anonymous: true,
                    span: Span::point(pos),
                })
            }
            Some(Spanned { tok: Tok::Ident(_), .. }) => {
                let (name, pos) = self.ident("constructor name")?;
                let fields = if matches!(self.peek(), Some(Spanned { tok: Tok::LParen, .. })) {
                    self.next();
                    self.fields()?
                } else {
                    Vec::new()
                };
                Ok(Constructor { name, fields, anonymous: false, span: Span::point(pos) })
            }
            Some(s) => Err(AsdlError::Syntax {
                pos: s.pos,
                message: format!("expected constructor, found {:?}", s.tok),
            }),
            None => Err(AsdlError::Syntax {
                pos: self.pos(),
                message: "expected constructor, found end of input".into(),
            }),
        }
    }

    fn grammar(&mut self) -> Result<AsdlGrammar, AsdlError> {
        let mut composites: IndexMap<String, Vec<Constructor>> = IndexMap::new();
        let mut primitives: Vec<String> = Vec::new();
        while let Some(spanned) = self.peek().cloned() {
            match spanned.tok {
                Tok::Pragma(name) if name == "primitive" => {
                    self.next();
                    while let Some(Spanned { tok: Tok::Ident(_), .. }) = self.peek() {
                        // A type definition also starts with an identifier;
                        // stop the pragma when `ident =` follows.
                        if matches!(self.peek2(), Some(Spanned { tok: Tok::Eq, .. })) {
                            break;
                        }
                        let (name, _) = self.ident("primitive type name")?;
                        primitives.push(name);
                    }
                }
                Tok::Pragma(name) => {
                    return Err(AsdlError::Syntax {
                        pos: spanned.pos,
                        message: format!("unknown pragma %{name}"),
                    });
                }
                Tok::Ident(_) => {
                    let (type_name, _) = self.ident("type name")?;
                    self.expect(&Tok::Eq, "'='")?;
                    let mut ctors = vec![self.alternative(&type_name)?];
                    while matches!(self.peek(), Some(Spanned { tok: Tok::Pipe, .. })) {
                        self.next();
                        ctors.push(self.alternative(&type_name)?);
                    }
                    composites.entry(type_name).or_default().extend(ctors);
                }
                _ => {
                    return Err(AsdlError::Syntax {
                        pos: spanned.pos,
                        message: format!("expected type definition, found {:?}", spanned.tok),
                    });
                }
            }
        }
        if composites.is_empty() {
            return Err(AsdlError::NoProductions);
        }
        Ok(AsdlGrammar { composites, primitives })
    }
}

/// Parse grammar text without semantic validation.
pub fn parse_unvalidated(text: &str) -> Result<AsdlGrammar, AsdlError> {
    let toks = lex(text)?;
    Parser { toks, ix: 0 }.grammar()
}

/// Parse grammar text and reject it if validation reports any error.
pub fn parse(text: &str) -> Result<AsdlGrammar, AsdlError> {
    let grammar = parse_unvalidated(text)?;
    let diags = validate(&grammar);
    if has_errors(&diags) {
        let msgs: Vec<String> =
            diags.iter().filter(|d| d.is_error()).map(|d| d.to_string()).collect();
        return Err(AsdlError::Invalid(msgs.join("; ")));
    }
    Ok(grammar)
}

/// Names that the graph layer introduces; user grammars may not claim them.
fn reserved_names() -> [&'static str; 4] {
    [NEXT_SIB, NEXT_TOKEN, SUBTOKEN_OF, LAST_TOKEN]
}

/// Semantic checks over a parsed grammar: every field type must resolve,
/// constructor names and field labels must not collide, and the names the
/// graph layer reserves must stay free.
pub fn validate(grammar: &AsdlGrammar) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen_primitives = HashMap::new();
    for (ix, p) in grammar.primitives.iter().enumerate() {
        if let Some(_prev) = seen_primitives.insert(p.clone(), ix) {
            diags.push(Diagnostic::error(format!("duplicate primitive type `{p}`"), None));
        }
        if grammar.is_composite(p) {
            diags.push(Diagnostic::error(
                format!("type `{p}` declared both primitive and composite"),
                None,
            ));
        }
    }
    let mut ctor_owner: HashMap<&str, &str> = HashMap::new();
    for (ty, ctors) in &grammar.composites {
        if ty == SUBTOKEN_TYPE {
            diags.push(Diagnostic::error(
                format!("type name `{SUBTOKEN_TYPE}` is reserved"),
                None,
            ));
        }
        for c in ctors {
            if let Some(prev) = ctor_owner.insert(c.name.as_str(), ty.as_str()) {
                diags.push(Diagnostic::error(
                    format!("duplicate constructor `{}` (already defined under `{prev}`)", c.name),
                    Some(c.span),
                ));
            }
            let mut labels = HashMap::new();
            for field in &c.fields {
                if !grammar.is_composite(&field.type_name)
                    && !grammar.is_primitive(&field.type_name)
                {
                    diags.push(Diagnostic::error(
                        format!(
                            "unresolved type `{}` in field `{}` of constructor `{}`",
                            field.type_name, field.label, c.name
                        ),
                        Some(c.span),
                    ));
                }
                if labels.insert(field.label.clone(), ()).is_some() {
                    diags.push(Diagnostic::error(
                        format!("duplicate field label `{}` in constructor `{}`", field.label, c.name),
                        Some(c.span),
                    ));
                }
                if reserved_names().contains(&field.label.as_str()) {
                    diags.push(Diagnostic::error(
                        format!("field label `{}` is reserved for crafted edges", field.label),
                        Some(c.span),
                    ));
                }
                if field.label.ends_with(REVERSE_SUFFIX) {
                    diags.push(Diagnostic::error(
                        format!("field label `{}` collides with reverse-edge naming", field.label),
                        Some(c.span),
                    ));
                }
            }
        }
    }
    if grammar.primitives.iter().any(|p| p == SUBTOKEN_TYPE) {
        diags.push(Diagnostic::error(format!("type name `{SUBTOKEN_TYPE}` is reserved"), None));
    }
    diags
}

// ---------------------------------------------------------------------------
// Registries
// ---------------------------------------------------------------------------

/// Dense node/edge type id assignment derived from a grammar.
///
/// Node ids cover composites (declaration order), then primitives, then the
/// subtoken type. Forward edge ids cover field labels in first-appearance
/// order, then `NextSib`, `NextToken`, `subtoken_of`; the reverse of forward
/// id `f` is `f + forward_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeRegistries {
    pub node_types: Vec<String>,
    pub edge_types: Vec<String>,
    pub forward_edge_count: usize,
    /// Node ids below this bound are composite types; ids from here up to
    /// (but excluding) the final subtoken id are primitive types.
    pub composite_count: usize,
    #[serde(skip)]
    node_index: HashMap<String, usize>,
    #[serde(skip)]
    edge_index: HashMap<String, usize>,
}

impl TypeRegistries {
    pub(crate) fn from_parts(
        node_types: Vec<String>,
        composite_count: usize,
        forward_edges: Vec<String>,
    ) -> Self {
        let forward_edge_count = forward_edges.len();
        let mut edge_types = forward_edges;
        let reverses: Vec<String> = edge_types
            .iter()
            .map(|name| {
                if name == NEXT_TOKEN {
                    LAST_TOKEN.to_string()
                } else {
                    format!("{name}{REVERSE_SUFFIX}")
                }
            })
            .collect();
        edge_types.extend(reverses);
        let node_index =
            node_types.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let edge_index =
            edge_types.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        TypeRegistries {
            node_types,
            edge_types,
            forward_edge_count,
            composite_count,
            node_index,
            edge_index,
        }
    }

    /// Rebuild the lookup tables after deserialization.
    pub fn rebuild_index(&mut self) {
        self.node_index =
            self.node_types.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        self.edge_index =
            self.edge_types.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn node_type_count(&self) -> usize {
        self.node_types.len()
    }

    pub fn edge_type_count(&self) -> usize {
        self.edge_types.len()
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    pub fn edge_id(&self, name: &str) -> Option<usize> {
        self.edge_index.get(name).copied()
    }

    pub fn node_name(&self, id: usize) -> &str {
        &self.node_types[id]
    }

    pub fn edge_name(&self, id: usize) -> &str {
        &self.edge_types[id]
    }

    /// Id of the reverse of any edge type; an involution.
    pub fn reverse_of(&self, edge_id: usize) -> usize {
        if edge_id < self.forward_edge_count {
            edge_id + self.forward_edge_count
        } else {
            edge_id - self.forward_edge_count
        }
    }

    pub fn is_forward(&self, edge_id: usize) -> bool {
        edge_id < self.forward_edge_count
    }

    pub fn subtoken_node_id(&self) -> usize {
        self.node_types.len() - 1
    }

    /// Whether the node type id names a primitive (terminal) grammar type.
    pub fn is_primitive_node(&self, node_type_id: usize) -> bool {
        node_type_id >= self.composite_count && node_type_id + 1 < self.node_types.len()
    }

    pub fn is_subtoken_node(&self, node_type_id: usize) -> bool {
        node_type_id + 1 == self.node_types.len()
    }
}

/// Derive registries from a validated grammar.
pub fn build_registries(grammar: &AsdlGrammar) -> TypeRegistries {
    let mut node_types: Vec<String> = grammar.composites.keys().cloned().collect();
    let composite_count = node_types.len();
    node_types.extend(grammar.primitives.iter().cloned());
    node_types.push(SUBTOKEN_TYPE.to_string());

    let mut forward: Vec<String> = Vec::new();
    for ctors in grammar.composites.values() {
        for c in ctors {
            for field in &c.fields {
                if !forward.iter().any(|l| l == &field.label) {
                    forward.push(field.label.clone());
                }
            }
        }
    }
    forward.push(NEXT_SIB.to_string());
    forward.push(NEXT_TOKEN.to_string());
    forward.push(SUBTOKEN_OF.to_string());
    TypeRegistries::from_parts(node_types, composite_count, forward)
}
