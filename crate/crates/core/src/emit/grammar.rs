//! Parser for the kernel dialect; the grammar is documented in
//! `docs/kernel-dialect.md`. Conformance means structure only: the
//! dialect is never executed, so the parser checks shape, not meaning.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("parse error at {line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Punct(char),
    DotDot,
    PlusEq,
    Arrow, // unused but reserved
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.src.get(self.pos).copied()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.pos + 1).copied()
    }

    fn next_tok(&mut self) -> Result<Option<(Tok, usize, usize)>, ParseError> {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.peek2() == Some(b'/') => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
        let (line, col) = (self.line, self.col);
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        let tok = match c {
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut s = String::new();
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || c == b'_' {
                        s.push(c as char);
                        self.bump();
                    } else {
                        break;
                    }
                }
                Tok::Ident(s)
            }
            b'0'..=b'9' => {
                let mut s = String::new();
                let mut seen_dot = false;
                while let Some(c) = self.peek() {
                    if c.is_ascii_digit()
                        || (c == b'.' && !seen_dot && self.peek2() != Some(b'.'))
                        || c == b'e'
                        || c == b'E'
                        || ((c == b'-' || c == b'+')
                            && matches!(s.bytes().last(), Some(b'e') | Some(b'E')))
                    {
                        if c == b'.' {
                            seen_dot = true;
                        }
                        s.push(c as char);
                        self.bump();
                    } else {
                        break;
                    }
                }
                Tok::Number(s)
            }
            b'.' if self.peek2() == Some(b'.') => {
                self.bump();
                self.bump();
                Tok::DotDot
            }
            b'+' if self.peek2() == Some(b'=') => {
                self.bump();
                self.bump();
                Tok::PlusEq
            }
            b'-' if self.peek2() == Some(b'>') => {
                self.bump();
                self.bump();
                Tok::Arrow
            }
            b'(' | b')' | b'{' | b'}' | b'[' | b']' | b',' | b';' | b':' | b'=' | b'*'
            | b'/' | b'+' | b'-' | b'<' | b'>' => {
                self.bump();
                Tok::Punct(c as char)
            }
            other => return Err(self.err(format!("unexpected byte {:?}", other as char))),
        };
        Ok(Some((tok, line, col)))
    }
}

pub struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
}

impl Parser {
    pub fn new(src: &str) -> Result<Self, ParseError> {
        let mut lex = Lexer::new(src);
        let mut toks = Vec::new();
        while let Some(t) = lex.next_tok()? {
            toks.push(t);
        }
        Ok(Self { toks, pos: 0 })
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self
            .toks
            .get(self.pos)
            .map(|(_, l, c)| (*l, *c))
            .unwrap_or((0, 0));
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.peek().cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        match self.bump() {
            Some(Tok::Punct(p)) if p == c => Ok(()),
            other => Err(self.err_here(format!("expected {c:?}, got {other:?}"))),
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.bump() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(self.err_here(format!("expected identifier, got {other:?}"))),
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        let s = self.expect_ident()?;
        if s == kw {
            Ok(())
        } else {
            Err(self.err_here(format!("expected keyword {kw}, got {s}")))
        }
    }

    fn at_punct(&self, c: char) -> bool {
        matches!(self.peek(), Some(Tok::Punct(p)) if *p == c)
    }

    fn at_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(i)) if i == s)
    }

    /// kernel := "kernel" ident "(" params? ")" block
    pub fn parse_kernel(&mut self) -> Result<(), ParseError> {
        self.expect_kw("kernel")?;
        self.expect_ident()?;
        self.expect_punct('(')?;
        if !self.at_punct(')') {
            loop {
                self.expect_ident()?; // param name
                self.expect_punct(':')?;
                self.parse_type()?;
                if self.at_punct(',') {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_punct(')')?;
        self.parse_block()?;
        if self.pos != self.toks.len() {
            return Err(self.err_here("trailing tokens after kernel"));
        }
        Ok(())
    }

    // type := ("f64" | "u32") "[" expr ("," expr)* "]"
    fn parse_type(&mut self) -> Result<(), ParseError> {
        let t = self.expect_ident()?;
        if t != "f64" && t != "u32" {
            return Err(self.err_here(format!("unknown element type {t}")));
        }
        self.expect_punct('[')?;
        loop {
            self.parse_expr()?;
            if self.at_punct(',') {
                self.bump();
            } else {
                break;
            }
        }
        self.expect_punct(']')?;
        Ok(())
    }

    fn parse_block(&mut self) -> Result<(), ParseError> {
        self.expect_punct('{')?;
        while !self.at_punct('}') {
            self.parse_stmt()?;
        }
        self.expect_punct('}')?;
        Ok(())
    }

    fn parse_stmt(&mut self) -> Result<(), ParseError> {
        if self.at_ident("launch") {
            self.bump();
            self.expect_kw("grid")?;
            self.parse_paren_exprs()?;
            self.expect_kw("block")?;
            self.parse_paren_exprs()?;
            self.expect_punct(';')?;
            return Ok(());
        }
        if self.at_ident("schedule") {
            self.bump();
            loop {
                self.expect_ident()?;
                self.expect_punct('=')?;
                self.parse_expr()?;
                if self.at_punct(',') {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect_punct(';')?;
            return Ok(());
        }
        if self.at_ident("def") {
            self.bump();
            self.expect_ident()?;
            self.expect_punct('(')?;
            self.expect_ident()?;
            self.expect_punct(')')?;
            self.expect_punct('=')?;
            self.parse_expr()?;
            self.expect_punct(';')?;
            return Ok(());
        }
        if self.at_ident("for") {
            self.bump();
            self.expect_ident()?;
            self.expect_kw("in")?;
            // range or iterable call
            self.parse_expr()?;
            if matches!(self.peek(), Some(Tok::DotDot)) {
                self.bump();
                self.parse_expr()?;
            }
            if self.at_ident("step") {
                self.bump();
                self.parse_expr()?;
            }
            self.parse_block()?;
            return Ok(());
        }
        if self.at_ident("let") {
            self.bump();
            self.expect_ident()?;
            self.expect_punct('=')?;
            self.parse_expr()?;
            self.expect_punct(';')?;
            return Ok(());
        }
        if self.at_ident("sync") {
            self.bump();
            self.expect_punct(';')?;
            return Ok(());
        }
        if self.at_ident("atomic_add") {
            self.bump();
            self.expect_punct('(')?;
            self.parse_expr()?;
            self.expect_punct(',')?;
            self.parse_expr()?;
            self.expect_punct(')')?;
            self.expect_punct(';')?;
            return Ok(());
        }
        // assignment or accumulation: lvalue ("=" | "+=") expr ";"
        self.parse_lvalue()?;
        match self.bump() {
            Some(Tok::Punct('=')) => {}
            Some(Tok::PlusEq) => {}
            other => return Err(self.err_here(format!("expected = or +=, got {other:?}"))),
        }
        self.parse_expr()?;
        self.expect_punct(';')?;
        Ok(())
    }

    fn parse_paren_exprs(&mut self) -> Result<(), ParseError> {
        self.expect_punct('(')?;
        loop {
            self.parse_expr()?;
            if self.at_punct(',') {
                self.bump();
            } else {
                break;
            }
        }
        self.expect_punct(')')?;
        Ok(())
    }

    fn parse_lvalue(&mut self) -> Result<(), ParseError> {
        self.expect_ident()?;
        if self.at_punct('[') {
            self.bump();
            loop {
                self.parse_expr()?;
                if self.at_punct(',') {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect_punct(']')?;
        }
        Ok(())
    }

    // expr := term (("+" | "-" | "*" | "/") term)*
    fn parse_expr(&mut self) -> Result<(), ParseError> {
        self.parse_term()?;
        while let Some(Tok::Punct(p)) = self.peek() {
            if matches!(p, '+' | '-' | '*' | '/') {
                self.bump();
                self.parse_term()?;
            } else {
                break;
            }
        }
        Ok(())
    }

    // term := number | ident postfix* | "(" expr ")" | "-" term
    fn parse_term(&mut self) -> Result<(), ParseError> {
        match self.peek().cloned() {
            Some(Tok::Number(_)) => {
                self.bump();
                Ok(())
            }
            Some(Tok::Punct('-')) => {
                self.bump();
                self.parse_term()
            }
            Some(Tok::Punct('(')) => {
                self.bump();
                self.parse_expr()?;
                self.expect_punct(')')?;
                Ok(())
            }
            Some(Tok::Ident(_)) => {
                self.bump();
                loop {
                    if self.at_punct('(') {
                        self.bump();
                        if !self.at_punct(')') {
                            loop {
                                self.parse_expr()?;
                                if self.at_punct(',') {
                                    self.bump();
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect_punct(')')?;
                    } else if self.at_punct('[') {
                        self.bump();
                        loop {
                            self.parse_expr()?;
                            if self.at_punct(',') {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                        self.expect_punct(']')?;
                    } else {
                        break;
                    }
                }
                Ok(())
            }
            other => Err(self.err_here(format!("expected expression, got {other:?}"))),
        }
    }
}

/// Parse one kernel text, returning its structural validity.
pub fn parse_kernel_text(src: &str) -> Result<(), ParseError> {
    Parser::new(src)?.parse_kernel()
}
