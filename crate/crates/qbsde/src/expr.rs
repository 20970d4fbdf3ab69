//! Tiny arithmetic expression grammar for config-declared coefficients
//! and payoffs.
//!
//! Deliberately small so configs stay declarative and auditable:
//!
//! ```text
//! expr    = term , { ("+" | "-") , term } ;
//! term    = unary , { ("*" | "/") , unary } ;
//! unary   = "-" , unary | primary ;
//! primary = number | var | func , "(" , expr , [ "," , expr ] , ")"
//!         | "(" , expr , ")" ;
//! var     = "t" | "s" | "v" ;
//! func    = "exp" | "ln" | "min" | "max" | "tanh" ;
//! number  = decimal floating literal ;
//! ```
//!
//! `min` and `max` take exactly two arguments; the other functions one.

use serde::{Deserialize, Serialize};

use crate::error::{QbsdeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Ln(Box<Expr>),
    Tanh(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Var {
    T,
    S,
    V,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens: &tokens, pos: 0, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(QbsdeError::Expr(format!(
                "unexpected trailing input at token {} in `{src}`",
                p.pos
            )));
        }
        Ok(e)
    }

    pub fn eval(&self, t: f64, s: f64, v: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::S) => s,
            Expr::Var(Var::V) => v,
            Expr::Neg(a) => -a.eval(t, s, v),
            Expr::Add(a, b) => a.eval(t, s, v) + b.eval(t, s, v),
            Expr::Sub(a, b) => a.eval(t, s, v) - b.eval(t, s, v),
            Expr::Mul(a, b) => a.eval(t, s, v) * b.eval(t, s, v),
            Expr::Div(a, b) => a.eval(t, s, v) / b.eval(t, s, v),
            Expr::Exp(a) => a.eval(t, s, v).exp(),
            Expr::Ln(a) => a.eval(t, s, v).ln(),
            Expr::Tanh(a) => a.eval(t, s, v).tanh(),
            Expr::Min(a, b) => a.eval(t, s, v).min(b.eval(t, s, v)),
            Expr::Max(a, b) => a.eval(t, s, v).max(b.eval(t, s, v)),
        }
    }

    /// True when the expression never reads `var`.
    pub fn is_free_of(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(v) => *v != var,
            Expr::Neg(a) | Expr::Exp(a) | Expr::Ln(a) | Expr::Tanh(a) => a.is_free_of(var),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.is_free_of(var) && b.is_free_of(var),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_digit() || d == '.' {
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && i + 1 < bytes.len()
                        && ((bytes[i + 1] as char).is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let n: f64 = text
                    .parse()
                    .map_err(|_| QbsdeError::Expr(format!("bad number `{text}` in `{src}`")))?;
                out.push(Token::Num(n));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Token::Ident(src[start..i].to_string()));
            }
            other => {
                return Err(QbsdeError::Expr(format!("unexpected character `{other}` in `{src}`")))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, t: &Token) -> Result<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(QbsdeError::Expr(format!(
                "expected {:?} at token {} in `{}`",
                t, self.pos, self.src
            )))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Token::Minus) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Token::Num(n)) => {
                self.pos += 1;
                Ok(Expr::Const(n))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.eat(&Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "t" => Ok(Expr::Var(Var::T)),
                    "s" => Ok(Expr::Var(Var::S)),
                    "v" => Ok(Expr::Var(Var::V)),
                    "exp" | "ln" | "tanh" => {
                        self.eat(&Token::LParen)?;
                        let a = self.expr()?;
                        self.eat(&Token::RParen)?;
                        Ok(match name.as_str() {
                            "exp" => Expr::Exp(Box::new(a)),
                            "ln" => Expr::Ln(Box::new(a)),
                            _ => Expr::Tanh(Box::new(a)),
                        })
                    }
                    "min" | "max" => {
                        self.eat(&Token::LParen)?;
                        let a = self.expr()?;
                        self.eat(&Token::Comma)?;
                        let b = self.expr()?;
                        self.eat(&Token::RParen)?;
                        Ok(if name == "min" {
                            Expr::Min(Box::new(a), Box::new(b))
                        } else {
                            Expr::Max(Box::new(a), Box::new(b))
                        })
                    }
                    other => Err(QbsdeError::Expr(format!(
                        "unknown identifier `{other}` in `{}` (allowed: t, s, v, exp, ln, tanh, min, max)",
                        self.src
                    ))),
                }
            }
            _ => Err(QbsdeError::Expr(format!(
                "unexpected end of expression in `{}`",
                self.src
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("0.5*exp(-v) + max(s - 1, 0) - min(t, 0.2)/2").unwrap();
        let got = e.eval(0.5, 1.4, 0.0);
        assert_relative_eq!(got, 0.5 + 0.4 - 0.1, epsilon = 1e-12);
    }

    #[test]
    fn precedence_and_unary_minus() {
        let e = Expr::parse("-2*3+1").unwrap();
        assert_relative_eq!(e.eval(0.0, 0.0, 0.0), -5.0);
        let e = Expr::parse("2*(3+1)").unwrap();
        assert_relative_eq!(e.eval(0.0, 0.0, 0.0), 8.0);
        let e = Expr::parse("1e-2 + 2E2").unwrap();
        assert_relative_eq!(e.eval(0.0, 0.0, 0.0), 200.01);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("2 ^ 3").is_err());
        assert!(Expr::parse("(1").is_err());
    }

    #[test]
    fn variable_freedom() {
        let e = Expr::parse("exp(v) + t").unwrap();
        assert!(e.is_free_of(Var::S));
        assert!(!e.is_free_of(Var::V));
    }
}
