//! Canonical text form of operator expressions.
//!
//! `I` is the identity, a capital letter is a block (with `_{key}` appended
//! when the share key differs from the letter), `+` separates terms,
//! juxtaposition composes (`GF` applies `F` first) and `b*( … )` scales.
//! Top-level sums are spaced (`I + F`); sums nested as factors are compact
//! (`(I+F)F`).

use std::fmt;
use std::str::FromStr;

use super::expr::{BlockId, OperatorExpr};
use super::AlgebraError;

fn write_expr(f: &mut fmt::Formatter<'_>, e: &OperatorExpr, spaced: bool, factor: bool) -> fmt::Result {
    match e {
        OperatorExpr::Identity => write!(f, "I"),
        OperatorExpr::Block(id) => {
            if id.share_key == id.name {
                write!(f, "{}", id.name)
            } else {
                write!(f, "{}_{{{}}}", id.name, id.share_key)
            }
        }
        OperatorExpr::Sum(terms) => {
            let sep = if spaced && !factor { " + " } else { "+" };
            if factor {
                write!(f, "(")?;
            }
            for (i, t) in terms.iter().enumerate() {
                if i > 0 {
                    write!(f, "{sep}")?;
                }
                write_expr(f, t, spaced && !factor, false)?;
            }
            if factor {
                write!(f, ")")?;
            }
            Ok(())
        }
        OperatorExpr::Compose(factors) => {
            for x in factors {
                write_expr(f, x, false, true)?;
            }
            Ok(())
        }
        OperatorExpr::Scaled(beta, inner) => {
            write!(f, "{beta}*(")?;
            write_expr(f, inner, spaced && !factor, false)?;
            write!(f, ")")
        }
    }
}

impl fmt::Display for OperatorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self, true, false)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> AlgebraError {
        AlgebraError::Syntax { pos: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_raw() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek_raw(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.peek_raw()
    }

    fn expect(&mut self, c: char) -> Result<(), AlgebraError> {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<OperatorExpr, AlgebraError> {
        let mut terms = vec![self.term()?];
        while self.peek() == Some('+') {
            self.pos += 1;
            terms.push(self.term()?);
        }
        Ok(OperatorExpr::sum(terms))
    }

    fn term(&mut self) -> Result<OperatorExpr, AlgebraError> {
        let mut factors = vec![self.factor()?];
        while matches!(self.peek(), Some(c) if c == '(' || c.is_ascii_uppercase() || c.is_ascii_digit() || c == '.')
        {
            factors.push(self.factor()?);
        }
        Ok(OperatorExpr::compose(factors))
    }

    fn factor(&mut self) -> Result<OperatorExpr, AlgebraError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some('I') => {
                self.pos += 1;
                Ok(OperatorExpr::Identity)
            }
            Some(c) if c.is_ascii_uppercase() => {
                self.pos += 1;
                let name = c.to_string();
                let share_key = if self.src[self.pos..].starts_with("_{") {
                    self.pos += 2;
                    let end = self.src[self.pos..]
                        .find('}')
                        .ok_or_else(|| self.err("unterminated share key"))?;
                    let key = self.src[self.pos..self.pos + end].to_string();
                    if key.is_empty() {
                        return Err(self.err("empty share key"));
                    }
                    self.pos += end + 1;
                    key
                } else {
                    name.clone()
                };
                Ok(OperatorExpr::Block(BlockId { name, share_key }))
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let start = self.pos;
                let bytes = self.src.as_bytes();
                while self.pos < bytes.len() {
                    let b = bytes[self.pos];
                    let exp_sign = (b == b'-' || b == b'+')
                        && matches!(bytes[self.pos - 1], b'e' | b'E');
                    if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = &self.src[start..self.pos];
                let beta: f64 = text
                    .parse()
                    .map_err(|_| AlgebraError::Syntax { pos: start, msg: format!("bad number '{text}'") })?;
                self.expect('*')?;
                self.expect('(')?;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(OperatorExpr::Scaled(beta, Box::new(inner)))
            }
            Some(c) => Err(self.err(format!("unexpected '{c}'"))),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

impl FromStr for OperatorExpr {
    type Err = AlgebraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { src: s, pos: 0 };
        let e = p.expr()?;
        if p.peek().is_some() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{cascade, expand_module, ModuleKind};
    use proptest::prelude::*;

    #[test]
    fn prints_canonical_forms() {
        let e = expand_module(ModuleKind::MPoly(3), 1.0).unwrap();
        assert_eq!(e.to_string(), "I + F + GF + HGF");
        assert_eq!(cascade(&e).unwrap().to_string(), "I + (I+(I+H)G)F");
    }

    #[test]
    fn share_key_subscripts() {
        let e: OperatorExpr = "I + F_{B.3.F}G_{B.3.G}".parse().unwrap();
        match &e {
            OperatorExpr::Sum(t) => match &t[1] {
                OperatorExpr::Compose(fs) => {
                    assert_eq!(fs[0], OperatorExpr::Block(BlockId::new("F", "B.3.F")));
                }
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
        assert_eq!(e.to_string(), "I + F_{B.3.F}G_{B.3.G}");
    }

    #[test]
    fn syntax_errors() {
        for bad in ["", "I +", "(I+F", "F_{", "0.3*F", "i", "I + F)"] {
            assert!(bad.parse::<OperatorExpr>().is_err(), "{bad:?}");
        }
    }

    fn arb_block() -> impl Strategy<Value = OperatorExpr> {
        prop_oneof![Just("F"), Just("G"), Just("H")]
            .prop_map(|n| OperatorExpr::Block(BlockId::local(n)))
    }

    fn arb_expr() -> impl Strategy<Value = OperatorExpr> {
        let leaf = prop_oneof![Just(OperatorExpr::Identity), arb_block()];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(OperatorExpr::sum),
                prop::collection::vec(inner.clone(), 2..4).prop_map(OperatorExpr::compose),
                (prop_oneof![Just(0.3), Just(0.5), Just(0.25)], inner)
                    .prop_map(|(b, e)| OperatorExpr::scaled(b, e)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let text = e.to_string();
            let back: OperatorExpr = text.parse().unwrap();
            prop_assert_eq!(back.to_string(), text);
            prop_assert_eq!(crate::algebra::expand_symbolic(&back), crate::algebra::expand_symbolic(&e));
        }
    }
}
