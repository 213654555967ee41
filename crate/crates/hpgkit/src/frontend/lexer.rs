//! MiniLang tokenizer with indentation tracking.
//!
//! Indentation uses spaces only; a tab anywhere in leading whitespace is an
//! error. Blank and comment-only lines produce no tokens and do not affect
//! the indent stack. Every non-empty logical line is closed by a `Newline`
//! token, and open indentation levels are closed by `Dedent` tokens at end
//! of input.

use super::FrontendError;
use crate::diag::{Pos, Span};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Name,
    Number,
    Str,
    Keyword,
    Operator,
    Newline,
    Indent,
    Dedent,
    Eof,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TokenKind::Name => "Name",
            TokenKind::Number => "Number",
            TokenKind::Str => "Str",
            TokenKind::Keyword => "Keyword",
            TokenKind::Operator => "Operator",
            TokenKind::Newline => "Newline",
            TokenKind::Indent => "Indent",
            TokenKind::Dedent => "Dedent",
            TokenKind::Eof => "Eof",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    /// Source text of the token; synthetic tokens carry an empty string.
    /// String tokens keep their quotes.
    pub text: String,
    pub pos: Pos,
}

impl Token {
    /// Character span of the token (zero-width for synthetic tokens).
    pub fn span(&self) -> Span {
        let end = Pos::new(self.pos.line, self.pos.col + self.text.chars().count() as u32);
        Span::new(self.pos, end)
    }
}

const KEYWORDS: [&str; 7] = ["def", "return", "if", "else", "while", "for", "in"];

fn lex_err(pos: Pos, message: impl Into<String>) -> FrontendError {
    FrontendError::Lex { pos, message: message.into() }
}

/// Tokenize MiniLang source into a flat token sequence ending with `Eof`.
pub fn tokenize(source: &str) -> Result<Vec<Token>, FrontendError> {
    let mut tokens = Vec::new();
    let mut indents: Vec<u32> = vec![0];
    let mut last_line = 0u32;

    for (ix, raw_line) in source.lines().enumerate() {
        let lineno = ix as u32 + 1;
        last_line = lineno;
        let chars: Vec<char> = raw_line.chars().collect();

        // Leading whitespace: spaces only.
        let mut col = 0usize;
        while col < chars.len() {
            match chars[col] {
                ' ' => col += 1,
                '\t' => {
                    return Err(lex_err(
                        Pos::new(lineno, col as u32 + 1),
                        "tab character in indentation; MiniLang indents with spaces only",
                    ))
                }
                _ => break,
            }
        }
        // Blank or comment-only lines are invisible to indentation.
        if col >= chars.len() || chars[col] == '#' {
            continue;
        }

        let indent = col as u32;
        let current = *indents.last().unwrap();
        if indent > current {
            indents.push(indent);
            tokens.push(Token { kind: TokenKind::Indent, text: String::new(), pos: Pos::new(lineno, 1) });
        } else if indent < current {
            while *indents.last().unwrap() > indent {
                indents.pop();
                tokens.push(Token {
                    kind: TokenKind::Dedent,
                    text: String::new(),
                    pos: Pos::new(lineno, 1),
                });
            }
            if *indents.last().unwrap() != indent {
                return Err(lex_err(
                    Pos::new(lineno, indent + 1),
                    "inconsistent dedent: indentation matches no enclosing block",
                ));
            }
        }

        lex_line(&chars, lineno, col, &mut tokens)?;
    }

    let eof_pos = Pos::new(last_line + 1, 1);
    while indents.len() > 1 {
        indents.pop();
        tokens.push(Token { kind: TokenKind::Dedent, text: String::new(), pos: eof_pos });
    }
    tokens.push(Token { kind: TokenKind::Eof, text: String::new(), pos: eof_pos });
    Ok(tokens)
}

fn lex_line(
    chars: &[char],
    lineno: u32,
    start: usize,
    tokens: &mut Vec<Token>,
) -> Result<(), FrontendError> {
    let mut col = start;
    let mut emitted = false;
    while col < chars.len() {
        let ch = chars[col];
        let pos = Pos::new(lineno, col as u32 + 1);
        match ch {
            ' ' => {
                col += 1;
                continue;
            }
            '\t' => return Err(lex_err(pos, "tab character in source line")),
            '#' => break,
            c if c.is_ascii_alphabetic() || c == '_' => {
                let begin = col;
                while col < chars.len() && (chars[col].is_ascii_alphanumeric() || chars[col] == '_')
                {
                    col += 1;
                }
                let text: String = chars[begin..col].iter().collect();
                let kind = if KEYWORDS.contains(&text.as_str()) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Name
                };
                tokens.push(Token { kind, text, pos });
            }
            c if c.is_ascii_digit() => {
                let begin = col;
                while col < chars.len() && chars[col].is_ascii_digit() {
                    col += 1;
                }
                if col < chars.len() && (chars[col].is_ascii_alphabetic() || chars[col] == '_') {
                    return Err(lex_err(
                        Pos::new(lineno, col as u32 + 1),
                        "identifier may not start with a digit",
                    ));
                }
                let text: String = chars[begin..col].iter().collect();
                tokens.push(Token { kind: TokenKind::Number, text, pos });
            }
            '"' => {
                let begin = col;
                col += 1;
                while col < chars.len() && chars[col] != '"' {
                    col += 1;
                }
                if col >= chars.len() {
                    return Err(lex_err(pos, "unterminated string literal"));
                }
                col += 1;
                let text: String = chars[begin..col].iter().collect();
                tokens.push(Token { kind: TokenKind::Str, text, pos });
            }
            '=' | '!' | '<' | '>' => {
                if col + 1 < chars.len() && chars[col + 1] == '=' {
                    let text: String = chars[col..col + 2].iter().collect();
                    if text == "<=" || text == ">=" {
                        return Err(lex_err(pos, format!("unsupported operator `{text}`")));
                    }
                    tokens.push(Token { kind: TokenKind::Operator, text, pos });
                    col += 2;
                } else if ch == '!' {
                    return Err(lex_err(pos, "unexpected character '!'"));
                } else {
                    tokens.push(Token { kind: TokenKind::Operator, text: ch.to_string(), pos });
                    col += 1;
                }
                emitted = true;
                continue;
            }
            '+' | '-' | '*' | '/' | '(' | ')' | ',' | ':' => {
                tokens.push(Token { kind: TokenKind::Operator, text: ch.to_string(), pos });
                col += 1;
            }
            other => return Err(lex_err(pos, format!("unexpected character {other:?}"))),
        }
        emitted = true;
    }
    if emitted {
        tokens.push(Token {
            kind: TokenKind::Newline,
            text: String::new(),
            pos: Pos::new(lineno, col as u32 + 1),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(tokens: &[Token]) -> Vec<TokenKind> {
        tokens.iter().map(|t| t.kind).collect()
    }

    #[test]
    fn single_statement_gets_trailing_newline_and_eof() {
        let toks = tokenize("return x").unwrap();
        assert_eq!(
            kinds(&toks),
            vec![TokenKind::Keyword, TokenKind::Name, TokenKind::Newline, TokenKind::Eof]
        );
        assert_eq!(toks[0].text, "return");
        assert_eq!(toks[1].text, "x");
    }

    #[test]
    fn fib_matches_hand_verified_golden_token_dump() {
        let source = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/fib.mini"
        ))
        .unwrap();
        let golden = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/golden/fib.tokens.txt"
        ))
        .unwrap();
        let toks = tokenize(&source).unwrap();
        let dump: String = toks
            .iter()
            .map(|t| format!("{} {} {}:{}\n", t.kind, t.text, t.pos.line, t.pos.col))
            .collect();
        assert_eq!(dump, golden);
    }

    #[test]
    fn tab_in_indentation_is_rejected() {
        let err = tokenize("if x:\n\treturn x\n").unwrap_err();
        match err {
            FrontendError::Lex { pos, message } => {
                assert_eq!(pos, Pos::new(2, 1));
                assert!(message.contains("tab"));
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn inconsistent_dedent_is_rejected() {
        let src = "if x:\n    return x\n  y = 1\n";
        let err = tokenize(src).unwrap_err();
        match err {
            FrontendError::Lex { message, .. } => assert!(message.contains("inconsistent dedent")),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn unterminated_string_is_rejected() {
        let err = tokenize("x = \"abc\n").unwrap_err();
        match err {
            FrontendError::Lex { message, .. } => assert!(message.contains("unterminated")),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_invisible() {
        let src = "# header\nx = 1\n\n   # indented comment\ny = 2\n";
        let toks = tokenize(src).unwrap();
        assert!(toks.iter().all(|t| t.kind != TokenKind::Indent));
        let names: Vec<&str> = toks
            .iter()
            .filter(|t| t.kind == TokenKind::Name)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(names, vec!["x", "y"]);
    }

    #[test]
    fn dedents_balance_indents() {
        let src = "while a:\n    while b:\n        x = 1\n";
        let toks = tokenize(src).unwrap();
        let indents = toks.iter().filter(|t| t.kind == TokenKind::Indent).count();
        let dedents = toks.iter().filter(|t| t.kind == TokenKind::Dedent).count();
        assert_eq!(indents, 2);
        assert_eq!(dedents, 2);
    }
}
