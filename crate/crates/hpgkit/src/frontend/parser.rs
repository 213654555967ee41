//! Recursive-descent parser from MiniLang tokens to typed trees.
//!
//! Precedence, loosest to tightest: comparison, additive, multiplicative,
//! call/atom. Binary operator levels are left-associative.

use super::lexer::{tokenize, Token, TokenKind};
use super::{AstChild, FrontendError, TypedAstNode};
use crate::asdl::AsdlGrammar;
use crate::diag::{has_errors, Pos, Span};

/// Parse MiniLang source into a typed tree rooted at a `mod` node and check
/// it against the supplied grammar.
pub fn parse_source(source: &str, grammar: &AsdlGrammar) -> Result<TypedAstNode, FrontendError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, ix: 0 };
    let ast = parser.module()?;
    let diags = super::validate_against_grammar(&ast, grammar);
    if has_errors(&diags) {
        return Err(FrontendError::Validation(diags));
    }
    Ok(ast)
}

struct Parser {
    tokens: Vec<Token>,
    ix: usize,
}

fn node(
    node_type: &str,
    value: impl Into<String>,
    children: Vec<AstChild>,
    span: Span,
) -> TypedAstNode {
    TypedAstNode::new(node_type, value, children, Some(span))
}

fn child(label: &str, n: TypedAstNode) -> AstChild {
    AstChild { label: label.into(), node: n }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.ix.min(self.tokens.len() - 1)]
    }

    fn bump(&mut self) -> Token {
        let t = self.peek().clone();
        if self.ix < self.tokens.len() - 1 {
            self.ix += 1;
        }
        t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        let t = self.peek();
        t.kind == TokenKind::Keyword && t.text == kw
    }

    fn at_operator(&self, op: &str) -> bool {
        let t = self.peek();
        t.kind == TokenKind::Operator && t.text == op
    }

    fn err(&self, expected: &[&str]) -> FrontendError {
        let t = self.peek();
        let found = match t.kind {
            TokenKind::Newline => "end of line".to_string(),
            TokenKind::Indent => "indent".to_string(),
            TokenKind::Dedent => "dedent".to_string(),
            TokenKind::Eof => "end of input".to_string(),
            _ => format!("`{}`", t.text),
        };
        FrontendError::Parse {
            pos: t.pos,
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect_operator(&mut self, op: &str) -> Result<Token, FrontendError> {
        if self.at_operator(op) {
            Ok(self.bump())
        } else {
            Err(self.err(&[&format!("`{op}`")]))
        }
    }

    fn expect_kind(&mut self, kind: TokenKind, what: &str) -> Result<Token, FrontendError> {
        if self.peek().kind == kind {
            Ok(self.bump())
        } else {
            Err(self.err(&[what]))
        }
    }

    fn module(&mut self) -> Result<TypedAstNode, FrontendError> {
        let start = self.peek().pos;
        let mut body = Vec::new();
        while self.peek().kind != TokenKind::Eof {
            body.push(child("body", self.statement()?));
        }
        let end = self.peek().span().end;
        let span = if let Some(last) = body.last() {
            Span::new(start, last.node.span.map(|s| s.end).unwrap_or(end).max(start))
        } else {
            Span::new(start, start)
        };
        Ok(node("mod", "Module", body, span))
    }

    fn statement(&mut self) -> Result<TypedAstNode, FrontendError> {
        let t = self.peek().clone();
        match t.kind {
            TokenKind::Keyword => match t.text.as_str() {
                "def" => self.function_def(),
                "return" => self.return_stmt(),
                "if" => self.if_stmt(),
                "while" => self.while_stmt(),
                "for" => self.for_stmt(),
                _ => Err(self.err(&["`def`", "`return`", "`if`", "`while`", "`for`", "expression"])),
            },
            TokenKind::Name | TokenKind::Number | TokenKind::Str => self.assign_or_expr(),
            TokenKind::Operator if t.text == "(" => self.assign_or_expr(),
            _ => Err(self.err(&["`def`", "`return`", "`if`", "`while`", "`for`", "expression"])),
        }
    }

    fn function_def(&mut self) -> Result<TypedAstNode, FrontendError> {
        let def = self.bump();
        let name_tok = self.expect_kind(TokenKind::Name, "function name")?;
        let name = node("identifier", name_tok.text.clone(), vec![], name_tok.span());
        self.expect_operator("(")?;
        let mut children = vec![child("name", name)];
        if !self.at_operator(")") {
            loop {
                let p = self.expect_kind(TokenKind::Name, "parameter name")?;
                let ident = node("identifier", p.text.clone(), vec![], p.span());
                children.push(child("args", node("arg", "arg", vec![child("name", ident)], p.span())));
                if self.at_operator(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_operator(")")?;
        let (body, end) = self.block()?;
        children.extend(body.into_iter().map(|s| child("body", s)));
        Ok(node("stmt", "FunctionDef", children, Span::new(def.pos, end)))
    }

    fn return_stmt(&mut self) -> Result<TypedAstNode, FrontendError> {
        let ret = self.bump();
        let mut children = Vec::new();
        let mut end = ret.span().end;
        if self.peek().kind != TokenKind::Newline {
            let value = self.expression()?;
            end = value.span.map(|s| s.end).unwrap_or(end);
            children.push(child("value", value));
        }
        self.expect_kind(TokenKind::Newline, "end of line")?;
        Ok(node("stmt", "Return", children, Span::new(ret.pos, end)))
    }

    fn if_stmt(&mut self) -> Result<TypedAstNode, FrontendError> {
        let kw = self.bump();
        let test = self.expression()?;
        let (body, mut end) = self.block()?;
        let mut children = vec![child("test", test)];
        children.extend(body.into_iter().map(|s| child("body", s)));
        if self.at_keyword("else") {
            self.bump();
            let (orelse, else_end) = self.block()?;
            end = else_end;
            children.extend(orelse.into_iter().map(|s| child("orelse", s)));
        }
        Ok(node("stmt", "If", children, Span::new(kw.pos, end)))
    }

    fn while_stmt(&mut self) -> Result<TypedAstNode, FrontendError> {
        let kw = self.bump();
        let test = self.expression()?;
        let (body, end) = self.block()?;
        let mut children = vec![child("test", test)];
        children.extend(body.into_iter().map(|s| child("body", s)));
        Ok(node("stmt", "While", children, Span::new(kw.pos, end)))
    }

    fn for_stmt(&mut self) -> Result<TypedAstNode, FrontendError> {
        let kw = self.bump();
        let name_tok = self.expect_kind(TokenKind::Name, "loop variable")?;
        let ident = node("identifier", name_tok.text.clone(), vec![], name_tok.span());
        let target = node("expr", "Name", vec![child("id", ident)], name_tok.span());
        if !self.at_keyword("in") {
            return Err(self.err(&["`in`"]));
        }
        self.bump();
        let iter = self.expression()?;
        let (body, end) = self.block()?;
        let mut children = vec![child("target", target), child("iter", iter)];
        children.extend(body.into_iter().map(|s| child("body", s)));
        Ok(node("stmt", "For", children, Span::new(kw.pos, end)))
    }

    fn assign_or_expr(&mut self) -> Result<TypedAstNode, FrontendError> {
        let first = self.expression()?;
        let start = first.span.expect("parsed expressions carry spans").start;
        if self.at_operator("=") {
            self.bump();
            let value = self.expression()?;
            let end = value.span.unwrap().end;
            self.expect_kind(TokenKind::Newline, "end of line")?;
            return Ok(node(
                "stmt",
                "Assign",
                vec![child("target", first), child("value", value)],
                Span::new(start, end),
            ));
        }
        let end = first.span.unwrap().end;
        self.expect_kind(TokenKind::Newline, "end of line")?;
        Ok(node("stmt", "Expr", vec![child("value", first)], Span::new(start, end)))
    }

    /// `: NEWLINE INDENT stmt+ DEDENT`; returns the statements and the end
    /// position of the last one.
    fn block(&mut self) -> Result<(Vec<TypedAstNode>, Pos), FrontendError> {
        self.expect_operator(":")?;
        self.expect_kind(TokenKind::Newline, "end of line")?;
        self.expect_kind(TokenKind::Indent, "indented block")?;
        let mut stmts = Vec::new();
        while self.peek().kind != TokenKind::Dedent {
            stmts.push(self.statement()?);
        }
        self.expect_kind(TokenKind::Dedent, "dedent")?;
        let end = stmts
            .last()
            .and_then(|s| s.span)
            .map(|s| s.end)
            .expect("blocks contain at least one statement");
        Ok((stmts, end))
    }

    fn expression(&mut self) -> Result<TypedAstNode, FrontendError> {
        self.comparison()
    }

    fn comparison(&mut self) -> Result<TypedAstNode, FrontendError> {
        let mut left = self.additive()?;
        loop {
            let op_name = if self.at_operator("<") {
                "Lt"
            } else if self.at_operator(">") {
                "Gt"
            } else if self.at_operator("==") {
                "Eq"
            } else if self.at_operator("!=") {
                "NotEq"
            } else {
                break;
            };
            let op_tok = self.bump();
            let op = node("cmpop", op_name, vec![], op_tok.span());
            let right = self.additive()?;
            let span = left.span.unwrap().merge(&right.span.unwrap());
            left = node(
                "expr",
                "Compare",
                vec![child("left", left), child("op", op), child("right", right)],
                span,
            );
        }
        Ok(left)
    }

    fn additive(&mut self) -> Result<TypedAstNode, FrontendError> {
        let mut left = self.multiplicative()?;
        loop {
            let op_name = if self.at_operator("+") {
                "Add"
            } else if self.at_operator("-") {
                "Sub"
            } else {
                break;
            };
            let op_tok = self.bump();
            let op = node("operator", op_name, vec![], op_tok.span());
            let right = self.multiplicative()?;
            let span = left.span.unwrap().merge(&right.span.unwrap());
            left = node(
                "expr",
                "BinOp",
                vec![child("left", left), child("op", op), child("right", right)],
                span,
            );
        }
        Ok(left)
    }

    fn multiplicative(&mut self) -> Result<TypedAstNode, FrontendError> {
        let mut left = self.call_atom()?;
        loop {
            let op_name = if self.at_operator("*") {
                "Mult"
            } else if self.at_operator("/") {
                "Div"
            } else {
                break;
            };
            let op_tok = self.bump();
            let op = node("operator", op_name, vec![], op_tok.span());
            let right = self.call_atom()?;
            let span = left.span.unwrap().merge(&right.span.unwrap());
            left = node(
                "expr",
                "BinOp",
                vec![child("left", left), child("op", op), child("right", right)],
                span,
            );
        }
        Ok(left)
    }

    fn call_atom(&mut self) -> Result<TypedAstNode, FrontendError> {
        let mut expr = self.atom()?;
        while self.at_operator("(") {
            self.bump();
            let mut children = vec![child("func", expr)];
            if !self.at_operator(")") {
                loop {
                    children.push(child("args", self.expression()?));
                    if self.at_operator(",") {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            let close = self.expect_operator(")")?;
            let span = children[0].node.span.unwrap().merge(&close.span());
            expr = node("expr", "Call", children, span);
        }
        Ok(expr)
    }

    fn atom(&mut self) -> Result<TypedAstNode, FrontendError> {
        let t = self.peek().clone();
        match t.kind {
            TokenKind::Name => {
                self.bump();
                let ident = node("identifier", t.text.clone(), vec![], t.span());
                Ok(node("expr", "Name", vec![child("id", ident)], t.span()))
            }
            TokenKind::Number => {
                self.bump();
                // Numeric text is kept verbatim; no normalization.
                let term = node("int", t.text.clone(), vec![], t.span());
                Ok(node("expr", "Constant", vec![child("value", term)], t.span()))
            }
            TokenKind::Str => {
                self.bump();
                let inner = t.text.trim_matches('"').to_string();
                let term = node("string", inner, vec![], t.span());
                Ok(node("expr", "Constant", vec![child("value", term)], t.span()))
            }
            TokenKind::Operator if t.text == "(" => {
                self.bump();
                let inner = self.expression()?;
                self.expect_operator(")")?;
                Ok(inner)
            }
            _ => Err(self.err(&["identifier", "number", "string", "`(`"])),
        }
    }
}
