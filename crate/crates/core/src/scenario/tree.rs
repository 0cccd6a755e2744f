//! Declarative tree expressions for scenario files.
//!
//! Grammar:
//!
//! ```text
//! expr       := "pipeline" "(" expr { "," expr } ")"
//!             | "loop" "(" expr "," loop_args ")"
//!             | "map" "(" expr ")"
//!             | "map_reduce" "(" expr "," reducer ")"
//!             | kernel-id
//! loop_args  := count-or-cond { "," flag }
//! count-or-cond := integer | "while_below" "(" item "," limit "," step ")"
//! flag       := "sync" | "updates" "=" "[" item { "," item } "]"
//! reducer    := "add" | "sub" | "mul" | "div" | expr
//! ```
//!
//! Example: `pipeline(k1, loop(k2, 3, sync, updates=[x]), k3)`.

use std::collections::BTreeMap;

use crate::sct::{HostReducer, KernelSpec, LoopCondition, LoopState, Reduction, Sct, SctError};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Int(u64),
    Float(f64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Equals,
}

fn tokenize(input: &str) -> Result<Vec<Token>, String> {
    let mut tokens = Vec::new();
    let mut chars = input.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                chars.next();
            }
            '(' => {
                chars.next();
                tokens.push(Token::LParen);
            }
            ')' => {
                chars.next();
                tokens.push(Token::RParen);
            }
            '[' => {
                chars.next();
                tokens.push(Token::LBracket);
            }
            ']' => {
                chars.next();
                tokens.push(Token::RBracket);
            }
            ',' => {
                chars.next();
                tokens.push(Token::Comma);
            }
            '=' => {
                chars.next();
                tokens.push(Token::Equals);
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                let mut is_float = false;
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() {
                        s.push(d);
                        chars.next();
                    } else if d == '.' && !is_float {
                        is_float = true;
                        s.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                if is_float {
                    tokens.push(Token::Float(s.parse().map_err(|e| format!("bad number '{s}': {e}"))?));
                } else {
                    tokens.push(Token::Int(s.parse().map_err(|e| format!("bad number '{s}': {e}"))?));
                }
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                tokens.push(Token::Ident(s));
            }
            other => return Err(format!("unexpected character '{other}'")),
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    kernels: &'a BTreeMap<String, KernelSpec>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Token, String> {
        let t = self.tokens.get(self.pos).cloned().ok_or("unexpected end of expression")?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, t: Token) -> Result<(), String> {
        let got = self.next()?;
        if got == t {
            Ok(())
        } else {
            Err(format!("expected {t:?}, got {got:?}"))
        }
    }

    fn expr(&mut self) -> Result<Sct, String> {
        let head = match self.next()? {
            Token::Ident(s) => s,
            other => return Err(format!("expected a construct or kernel id, got {other:?}")),
        };
        match head.as_str() {
            "pipeline" => {
                self.expect(Token::LParen)?;
                let mut stages = vec![self.expr()?];
                while self.peek() == Some(&Token::Comma) {
                    self.next()?;
                    stages.push(self.expr()?);
                }
                self.expect(Token::RParen)?;
                Sct::pipeline(stages).map_err(stringify)
            }
            "map" => {
                self.expect(Token::LParen)?;
                let tree = self.expr()?;
                self.expect(Token::RParen)?;
                Sct::map(tree).map_err(stringify)
            }
            "map_reduce" => {
                self.expect(Token::LParen)?;
                let map_stage = self.expr()?;
                self.expect(Token::Comma)?;
                let reduction = self.reducer()?;
                self.expect(Token::RParen)?;
                Sct::map_reduce(map_stage, reduction).map_err(stringify)
            }
            "loop" => {
                self.expect(Token::LParen)?;
                let body = self.expr()?;
                self.expect(Token::Comma)?;
                let state = self.loop_state()?;
                self.expect(Token::RParen)?;
                Sct::loop_(body, state).map_err(stringify)
            }
            name => {
                let kernel = self
                    .kernels
                    .get(name)
                    .ok_or_else(|| format!("unknown kernel '{name}'"))?;
                Sct::leaf(kernel.clone()).map_err(stringify)
            }
        }
    }

    fn reducer(&mut self) -> Result<Reduction, String> {
        if let Some(Token::Ident(s)) = self.peek() {
            let op = match s.as_str() {
                "add" => Some(HostReducer::Add),
                "sub" => Some(HostReducer::Sub),
                "mul" => Some(HostReducer::Mul),
                "div" => Some(HostReducer::Div),
                _ => None,
            };
            // A reducer name is only terminal if not followed by '(',
            // since a kernel could shadow the name otherwise.
            if let Some(op) = op {
                if self.tokens.get(self.pos + 1) != Some(&Token::LParen) {
                    self.pos += 1;
                    return Ok(Reduction::Host(op));
                }
            }
        }
        Ok(Reduction::Tree(Box::new(self.expr()?)))
    }

    fn loop_state(&mut self) -> Result<LoopState, String> {
        let condition = match self.next()? {
            Token::Int(n) => LoopCondition::Count(n),
            Token::Ident(s) if s == "while_below" => {
                self.expect(Token::LParen)?;
                let item = match self.next()? {
                    Token::Ident(i) => i,
                    other => return Err(format!("expected state item name, got {other:?}")),
                };
                self.expect(Token::Comma)?;
                let limit = self.number()?;
                self.expect(Token::Comma)?;
                let step = self.number()?;
                self.expect(Token::RParen)?;
                LoopCondition::WhileBelow { item, limit, step }
            }
            other => return Err(format!("expected an iteration count or while_below, got {other:?}")),
        };

        let mut state = LoopState { condition, updated_items: Vec::new(), global_sync: false };
        while self.peek() == Some(&Token::Comma) {
            self.next()?;
            match self.next()? {
                Token::Ident(f) if f == "sync" => state.global_sync = true,
                Token::Ident(f) if f == "updates" => {
                    self.expect(Token::Equals)?;
                    self.expect(Token::LBracket)?;
                    loop {
                        match self.next()? {
                            Token::Ident(i) => state.updated_items.push(i),
                            Token::RBracket => break,
                            Token::Comma => {}
                            other => return Err(format!("bad updates list: {other:?}")),
                        }
                    }
                }
                other => return Err(format!("unknown loop flag {other:?}")),
            }
        }
        if let LoopCondition::WhileBelow { item, .. } = &state.condition {
            if !state.updated_items.contains(item) {
                state.updated_items.push(item.clone());
            }
        }
        Ok(state)
    }

    fn number(&mut self) -> Result<f64, String> {
        match self.next()? {
            Token::Int(n) => Ok(n as f64),
            Token::Float(f) => Ok(f),
            other => Err(format!("expected a number, got {other:?}")),
        }
    }
}

fn stringify(e: SctError) -> String {
    e.to_string()
}

/// Parse a tree expression against the declared kernels.
pub fn parse_tree(expr: &str, kernels: &BTreeMap<String, KernelSpec>) -> Result<Sct, String> {
    let tokens = tokenize(expr)?;
    let mut parser = Parser { tokens, pos: 0, kernels };
    let tree = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(format!("trailing input after expression (token {})", parser.pos));
    }
    Ok(tree)
}
