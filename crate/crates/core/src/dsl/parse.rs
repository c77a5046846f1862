use crate::algebra::{AlgebraError, ModuleKind};

use super::{DslError, NetworkConfig};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Colon,
    Semi,
    Arrow,
    Open,
    Close,
    Times,
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

fn lex(src: &str) -> Result<Vec<Spanned>, DslError> {
    let mut out = Vec::new();
    for (li, line) in src.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let at = |tok| Spanned { tok, line: li + 1, column: i + 1 };
            match c {
                '#' => break,
                c if c.is_whitespace() => i += 1,
                ':' => {
                    out.push(at(Tok::Colon));
                    i += 1;
                }
                ';' => {
                    out.push(at(Tok::Semi));
                    i += 1;
                }
                '(' => {
                    out.push(at(Tok::Open));
                    i += 1;
                }
                ')' => {
                    out.push(at(Tok::Close));
                    i += 1;
                }
                '→' => {
                    out.push(at(Tok::Arrow));
                    i += 1;
                }
                '×' => {
                    out.push(at(Tok::Times));
                    i += 1;
                }
                '-' if chars.get(i + 1) == Some(&'>') => {
                    out.push(at(Tok::Arrow));
                    i += 2;
                }
                c if is_word_char(c) => {
                    let start = i;
                    while i < chars.len()
                        && is_word_char(chars[i])
                        && !(chars[i] == '-' && chars.get(i + 1) == Some(&'>'))
                    {
                        i += 1;
                    }
                    let word: String = chars[start..i].iter().collect();
                    out.push(Spanned { tok: Tok::Word(word), line: li + 1, column: start + 1 });
                }
                other => {
                    return Err(DslError::Syntax {
                        line: li + 1,
                        column: i + 1,
                        msg: format!("unexpected character '{other}'"),
                    })
                }
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |s| (s.line, s.column))
    }

    fn syntax(&self, msg: impl Into<String>) -> DslError {
        let (line, column) = self.here();
        DslError::Syntax { line, column, msg: msg.into() }
    }

    fn next_word(&mut self, what: &str) -> Result<String, DslError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.syntax(format!("expected {what}"))),
        }
    }

    fn eat(&mut self, tok: Tok, what: &str) -> Result<(), DslError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(format!("expected {what}")))
        }
    }

    fn network(&mut self) -> Result<Vec<(String, Vec<ModuleKind>)>, DslError> {
        let mut stages = vec![self.stage()?];
        while self.peek() == Some(&Tok::Semi) {
            self.pos += 1;
            stages.push(self.stage()?);
        }
        if self.pos < self.toks.len() {
            return Err(self.syntax("expected ';' or end of input"));
        }
        Ok(stages)
    }

    fn stage(&mut self) -> Result<(String, Vec<ModuleKind>), DslError> {
        let name = self.next_word("stage name")?;
        if !name.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
            || name.contains('-')
        {
            self.pos -= 1;
            return Err(self.syntax(format!("invalid stage name '{name}'")));
        }
        self.eat(Tok::Colon, "':'")?;
        let modules = self.chain()?;
        Ok((name, modules))
    }

    fn chain(&mut self) -> Result<Vec<ModuleKind>, DslError> {
        let mut out = self.group()?;
        while self.peek() == Some(&Tok::Arrow) {
            self.pos += 1;
            out.extend(self.group()?);
        }
        Ok(out)
    }

    fn group(&mut self) -> Result<Vec<ModuleKind>, DslError> {
        if self.peek() == Some(&Tok::Open) {
            self.pos += 1;
            let body = self.chain()?;
            self.eat(Tok::Close, "')'")?;
            match self.peek() {
                Some(Tok::Times) => self.pos += 1,
                Some(Tok::Word(w)) if w == "x" => self.pos += 1,
                Some(Tok::Word(w)) if w.starts_with('x') && w[1..].bytes().all(|b| b.is_ascii_digit()) && w.len() > 1 => {
                    // "x4" written without a space
                    let (line, column) = self.here();
                    let n = w[1..].to_string();
                    self.toks[self.pos] = Spanned { tok: Tok::Word(n), line, column: column + 1 };
                }
                _ => return Err(self.syntax("expected 'x' after ')'")),
            }
            let (line, column) = self.here();
            let count = self.next_word("repetition count")?;
            let n: usize = count.parse().map_err(|_| DslError::Syntax {
                line,
                column,
                msg: format!("invalid repetition count '{count}'"),
            })?;
            if n == 0 {
                return Err(DslError::ZeroRepeat { line, column });
            }
            Ok(body.iter().cycle().take(body.len() * n).copied().collect())
        } else {
            let (line, column) = self.here();
            let token = self.next_word("module")?;
            match token.parse::<ModuleKind>() {
                Ok(k) => Ok(vec![k]),
                Err(AlgebraError::ZeroOrder) => Err(DslError::Syntax {
                    line,
                    column,
                    msg: format!("module order must be at least 1 in '{token}'"),
                }),
                Err(_) => Err(DslError::UnknownModule { line, column, token }),
            }
        }
    }
}

/// `IR a-b-c` → stages A, B, C of plain residual units.
fn shorthand(toks: &[Spanned]) -> Option<Result<Vec<(String, Vec<ModuleKind>)>, DslError>> {
    match toks {
        [Spanned { tok: Tok::Word(ir), .. }, Spanned { tok: Tok::Word(counts), line, column }]
            if ir == "IR" =>
        {
            let parts: Vec<&str> = counts.split('-').collect();
            let mut stages = Vec::new();
            for (i, p) in parts.iter().enumerate() {
                let n: usize = match p.parse() {
                    Ok(n) => n,
                    Err(_) => {
                        return Some(Err(DslError::Syntax {
                            line: *line,
                            column: *column,
                            msg: format!("invalid stage counts '{counts}'"),
                        }))
                    }
                };
                if n == 0 {
                    return Some(Err(DslError::ZeroRepeat { line: *line, column: *column }));
                }
                let name = ((b'A' + i as u8) as char).to_string();
                stages.push((name, vec![ModuleKind::Ir; n]));
            }
            Some(Ok(stages))
        }
        _ => None,
    }
}

/// Parses a network description into a fully unrolled configuration.
pub fn parse_network(text: &str) -> Result<NetworkConfig, DslError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(DslError::Syntax { line: 1, column: 1, msg: "empty network description".into() });
    }
    let stages = match shorthand(&toks) {
        Some(r) => r?,
        None => {
            let last = text.lines().count().max(1);
            let col = text.lines().last().map_or(0, |l| l.chars().count()) + 1;
            let mut p = Parser { toks, pos: 0, end: (last, col) };
            p.network()?
        }
    };
    NetworkConfig::from_stages(stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_stage_unrolls_in_order() {
        let cfg = parse_network("B: (3-way -> mpoly-3 -> poly-3) x 4").unwrap();
        assert_eq!(cfg.stages.len(), 1);
        let m = &cfg.stages[0].modules;
        assert_eq!(m.len(), 12);
        for chunk in m.chunks(3) {
            assert_eq!(chunk, [ModuleKind::KWay(3), ModuleKind::MPoly(3), ModuleKind::Poly(3)]);
        }
    }

    #[test]
    fn typographic_forms() {
        let a = parse_network("B: (3-way → mpoly-3 → poly-3) × 4").unwrap();
        let b = parse_network("B:(3-way->mpoly-3->poly-3)x4").unwrap();
        let c = parse_network("B: (3-way -> mpoly-3 -> poly-3) x 4").unwrap();
        assert_eq!(a, c);
        assert_eq!(b, c);
    }

    #[test]
    fn shorthand_stages() {
        let cfg = parse_network("IR 3-6-3").unwrap();
        let counts: Vec<usize> = cfg.stages.iter().map(|s| s.modules.len()).collect();
        assert_eq!(counts, [3, 6, 3]);
        let names: Vec<&str> = cfg.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
        assert!(cfg.modules().all(|(_, _, k)| k == ModuleKind::Ir));
        assert_eq!(cfg.stages[1].width, 32);
        assert_eq!(cfg.stages[2].resolution, 4);
    }

    #[test]
    fn minimal_program() {
        let cfg = parse_network("A: ir").unwrap();
        assert_eq!(cfg.stages.len(), 1);
        assert_eq!(cfg.stages[0].modules, [ModuleKind::Ir]);
    }

    #[test]
    fn comments_and_newlines() {
        let cfg = parse_network("# baseline\nA: ir -> ir # two units\n;\nB: (poly-2) x 2").unwrap();
        assert_eq!(cfg.module_count(), 4);
    }

    #[test]
    fn nested_groups() {
        let cfg = parse_network("A: ((ir -> 2-way) x 2 -> poly-3) x 3").unwrap();
        assert_eq!(cfg.stages[0].modules.len(), 15);
    }

    #[test]
    fn error_positions() {
        match parse_network("A: ir ->\nB: ir") {
            Err(DslError::UnknownModule { line: 2, column: 1, token }) => assert_eq!(token, "B"),
            other => panic!("{other:?}"),
        }
        match parse_network("A: (ir) x 0") {
            Err(DslError::ZeroRepeat { line: 1, column: 11 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_network(""), Err(DslError::Syntax { line: 1, column: 1, .. })));
        assert!(matches!(parse_network("# only a comment"), Err(DslError::Syntax { .. })));
        assert!(matches!(parse_network("A: conv"), Err(DslError::UnknownModule { .. })));
        assert!(matches!(parse_network("A: poly-0"), Err(DslError::Syntax { .. })));
        assert!(matches!(parse_network("A: ir; A: ir"), Err(DslError::DuplicateStage(_))));
        assert!(matches!(parse_network("A: (ir) 3"), Err(DslError::Syntax { .. })));
        assert!(matches!(parse_network("A: ir ir"), Err(DslError::Syntax { .. })));
        assert!(matches!(parse_network("A ir"), Err(DslError::Syntax { .. })));
        assert!(matches!(parse_network("IR 3-0-3"), Err(DslError::ZeroRepeat { .. })));
    }
}
