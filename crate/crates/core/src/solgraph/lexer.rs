//! Lexical scanner for Solidity source directives.
//!
//! Only the pieces needed to find `import` and `pragma solidity` directives are
//! recognised. Comments and string literals are consumed as whole tokens so
//! that anything inside them can never be mistaken for a directive.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    Ident,
    Str { terminated: bool },
    Punct(char),
}

#[derive(Debug, Clone, Copy)]
struct Tok {
    kind: TokKind,
    start: usize,
    end: usize,
}

/// The syntactic form of an import directive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportKind {
    /// `import "p";`
    Plain,
    /// `import "p" as A;`
    Aliased,
    /// `import {X, Y as Z} from "p";`
    NamedSymbols,
    /// `import * as A from "p";`
    Glob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportStatement {
    /// The quoted path, exactly as written between the quotes.
    pub specifier: String,
    pub kind: ImportKind,
    /// Names pulled in by a `{...}` import. Empty for the other forms.
    pub symbols: Vec<String>,
    /// Unit alias for `as A` and `* as A` forms.
    pub unit_alias: Option<String>,
    /// Byte offsets of the whole directive, `import` through `;`.
    pub byte_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub offset: usize,
    pub message: String,
}

/// Everything the scanner extracts from one file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedSource {
    pub imports: Vec<ImportStatement>,
    pub pragma_versions: Vec<String>,
    pub warnings: Vec<ParseWarning>,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$'
}

fn tokenize(text: &str, warnings: &mut Vec<ParseWarning>) -> Vec<Tok> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
            match text[i + 2..].find("*/") {
                Some(rel) => i = i + 2 + rel + 2,
                None => {
                    warnings.push(ParseWarning {
                        offset: i,
                        message: "unterminated block comment".into(),
                    });
                    i = bytes.len();
                }
            }
            continue;
        }
        if b == b'"' || b == b'\'' {
            let start = i;
            i += 1;
            let mut terminated = false;
            while i < bytes.len() {
                match bytes[i] {
                    b'\\' => i += 2,
                    b'\n' | b'\r' => break,
                    c if c == b => {
                        i += 1;
                        terminated = true;
                        break;
                    }
                    _ => i += 1,
                }
            }
            let end = i.min(bytes.len());
            toks.push(Tok {
                kind: TokKind::Str { terminated },
                start,
                end,
            });
            i = end;
            continue;
        }
        // Multi-byte characters only occur inside comments or strings in valid
        // Solidity; anywhere else they are treated as single punctuation.
        let c = text[i..].chars().next().unwrap_or('\0');
        if is_ident_start(c) || c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && is_ident_continue(bytes[i] as char) {
                i += 1;
            }
            toks.push(Tok {
                kind: TokKind::Ident,
                start,
                end: i,
            });
            continue;
        }
        toks.push(Tok {
            kind: TokKind::Punct(c),
            start: i,
            end: i + c.len_utf8(),
        });
        i += c.len_utf8();
    }
    toks
}

struct Cursor<'a> {
    text: &'a str,
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn text_of(&self, t: Tok) -> &'a str {
        &self.text[t.start..t.end]
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        match self.peek() {
            Some(t) if t.kind == TokKind::Ident && self.text_of(t) == kw => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        match self.peek() {
            Some(t) if t.kind == TokKind::Punct(c) => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    fn ident(&mut self) -> Result<String, String> {
        match self.peek() {
            Some(t) if t.kind == TokKind::Ident => {
                self.pos += 1;
                Ok(self.text_of(t).to_string())
            }
            _ => Err("expected identifier".into()),
        }
    }

    fn string(&mut self) -> Result<String, String> {
        match self.peek() {
            Some(Tok {
                kind: TokKind::Str { terminated: false },
                ..
            }) => Err("unterminated string literal".into()),
            Some(t @ Tok {
                kind: TokKind::Str { terminated: true },
                ..
            }) => {
                self.pos += 1;
                let inner = &self.text[t.start + 1..t.end - 1];
                if inner.is_empty() {
                    Err("empty import path".into())
                } else {
                    Ok(inner.to_string())
                }
            }
            _ => Err("expected quoted import path".into()),
        }
    }

    /// Error recovery: resume after the next `;`, or after an unterminated
    /// string, which cannot span lines.
    fn skip_past_semicolon(&mut self) {
        while let Some(t) = self.bump() {
            if matches!(t.kind, TokKind::Punct(';') | TokKind::Str { terminated: false }) {
                break;
            }
        }
    }
}

fn parse_import_body(cur: &mut Cursor<'_>, start: usize) -> Result<ImportStatement, String> {
    let (specifier, kind, symbols, unit_alias) = if cur.eat_punct('*') {
        if !cur.eat_keyword("as") {
            return Err("expected `as` after `*`".into());
        }
        let alias = cur.ident()?;
        if !cur.eat_keyword("from") {
            return Err("expected `from`".into());
        }
        (cur.string()?, ImportKind::Glob, Vec::new(), Some(alias))
    } else if cur.eat_punct('{') {
        let mut symbols = Vec::new();
        loop {
            if cur.eat_punct('}') {
                break;
            }
            symbols.push(cur.ident()?);
            if cur.eat_keyword("as") {
                cur.ident()?;
            }
            if cur.eat_punct(',') {
                continue;
            }
            if !cur.eat_punct('}') {
                return Err("expected `,` or `}` in symbol list".into());
            }
            break;
        }
        if symbols.is_empty() {
            return Err("empty symbol list".into());
        }
        if !cur.eat_keyword("from") {
            return Err("expected `from`".into());
        }
        (cur.string()?, ImportKind::NamedSymbols, symbols, None)
    } else {
        let spec = cur.string()?;
        if cur.eat_keyword("as") {
            let alias = cur.ident()?;
            (spec, ImportKind::Aliased, Vec::new(), Some(alias))
        } else {
            (spec, ImportKind::Plain, Vec::new(), None)
        }
    };
    match cur.peek() {
        Some(t) if t.kind == TokKind::Punct(';') => {
            cur.pos += 1;
            Ok(ImportStatement {
                specifier,
                kind,
                symbols,
                unit_alias,
                byte_span: (start, t.end),
            })
        }
        _ => Err("missing `;` after import".into()),
    }
}

/// Scans `raw_text` for import and version-pragma directives.
///
/// Directives are only recognised at statement position (file start or after
/// `;`, `{` or `}`), so `import` inside comments, strings, or as a member name
/// never matches. Malformed imports are reported as warnings and skipped.
pub fn parse_source(raw_text: &str) -> ParsedSource {
    let mut out = ParsedSource::default();
    let toks = tokenize(raw_text, &mut out.warnings);
    let mut cur = Cursor {
        text: raw_text,
        toks: &toks,
        pos: 0,
    };
    let mut at_statement_start = true;
    while let Some(t) = cur.peek() {
        let word = cur.text_of(t);
        if at_statement_start && t.kind == TokKind::Ident && word == "import" {
            cur.pos += 1;
            let save = cur.pos;
            match parse_import_body(&mut cur, t.start) {
                Ok(stmt) => out.imports.push(stmt),
                Err(message) => {
                    out.warnings.push(ParseWarning {
                        offset: t.start,
                        message: format!("malformed import: {message}"),
                    });
                    cur.pos = save;
                    cur.skip_past_semicolon();
                }
            }
            at_statement_start = true;
            continue;
        }
        if at_statement_start && t.kind == TokKind::Ident && word == "pragma" {
            cur.pos += 1;
            if cur.eat_keyword("solidity") {
                let from = cur.peek().map(|t| t.start);
                let mut to = None;
                while let Some(t) = cur.bump() {
                    if t.kind == TokKind::Punct(';') {
                        to = Some(t.start);
                        break;
                    }
                }
                if let (Some(from), Some(to)) = (from, to) {
                    let constraint = raw_text[from..to].trim();
                    if !constraint.is_empty() {
                        out.pragma_versions.push(constraint.to_string());
                    }
                }
            } else {
                cur.skip_past_semicolon();
            }
            at_statement_start = true;
            continue;
        }
        cur.pos += 1;
        at_statement_start = matches!(
            t.kind,
            TokKind::Punct(';') | TokKind::Punct('{') | TokKind::Punct('}')
        );
    }
    out
}

/// Returns the import directives in `raw_text`, in source order.
pub fn parse_imports(raw_text: &str) -> Vec<ImportStatement> {
    parse_source(raw_text).imports
}
