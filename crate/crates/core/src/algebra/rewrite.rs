//! Module construction and the rewrites applied to module expressions.
//!
//! A module expression has the shape `I + β·(M₁ + … + Mₖ)` where every `Mᵢ`
//! is a monomial. The naive form lists every path; the cascaded form
//! right-factors shared first-applied blocks (Horner style) so that every
//! distinct prefix is evaluated once.

use std::collections::HashSet;

use super::expr::{BlockId, ModuleKind, OperatorExpr};
use super::polynomial::{expand_symbolic, Monomial};
use super::AlgebraError;

/// Block letters in allocation order. `I` is reserved for the identity.
const LETTERS: &[u8] = b"FGHJKLMNOPQRSTUVWXYZABCDE";

/// Display letter of the `i`-th distinct block of a module.
pub fn block_letter(i: usize) -> Option<String> {
    LETTERS.get(i).map(|&c| (c as char).to_string())
}

fn check_beta(beta: f64) -> Result<(), AlgebraError> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(AlgebraError::BadBeta(beta))
    }
}

/// Non-identity paths of a module kind, in canonical order.
pub fn module_monomials(kind: ModuleKind) -> Result<Vec<Monomial>, AlgebraError> {
    let k = kind.order() as usize;
    if k == 0 {
        return Err(AlgebraError::ZeroOrder);
    }
    if kind.distinct_blocks() > LETTERS.len() {
        return Err(AlgebraError::OrderTooLarge(kind.order()));
    }
    let letter = |i: usize| BlockId::local(block_letter(i).unwrap());
    let monos = match kind {
        ModuleKind::Ir => vec![Monomial(vec![letter(0)])],
        ModuleKind::Poly(_) => (1..=k).map(|n| Monomial(vec![letter(0); n])).collect(),
        ModuleKind::MPoly(_) => (1..=k)
            .map(|n| Monomial((0..n).rev().map(letter).collect()))
            .collect(),
        ModuleKind::KWay(_) => (0..k).map(|i| Monomial(vec![letter(i)])).collect(),
    };
    Ok(monos)
}

fn naive_from_parts(beta: f64, monos: &[Monomial]) -> OperatorExpr {
    if monos.is_empty() {
        return OperatorExpr::Identity;
    }
    let residual = OperatorExpr::sum(monos.iter().map(Monomial::to_expr));
    OperatorExpr::sum([OperatorExpr::Identity, OperatorExpr::scaled(beta, residual)])
}

/// Canonical naive form `I + β·(M₁ + … + Mₖ)` of a module kind.
pub fn expand_module(kind: ModuleKind, beta: f64) -> Result<OperatorExpr, AlgebraError> {
    check_beta(beta)?;
    let monos = module_monomials(kind)?;
    Ok(naive_from_parts(beta, &monos))
}

/// Decomposition of a module-shaped expression.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleForm {
    pub beta: f64,
    /// Non-identity paths ordered by increasing order, then first appearance.
    pub paths: Vec<Monomial>,
}

impl ModuleForm {
    pub fn naive(&self) -> OperatorExpr {
        naive_from_parts(self.beta, &self.paths)
    }
}

/// Recognizes `I + β·Σ Mᵢ` in any equivalent written form.
///
/// The bare identity is accepted as a module with every path dropped.
pub fn module_form(expr: &OperatorExpr) -> Result<ModuleForm, AlgebraError> {
    let poly = expand_symbolic(expr);
    let not_module = |why: &str| AlgebraError::NotAModule(format!("{expr}: {why}"));
    if poly.coefficient(&Monomial::identity()) != 1.0 {
        return Err(not_module("identity path must have coefficient 1"));
    }
    let mut beta = None;
    let mut paths = Vec::new();
    for (c, m) in poly.terms() {
        if m.is_identity() {
            continue;
        }
        match beta {
            None => beta = Some(*c),
            Some(b) if b == *c => {}
            Some(_) => return Err(not_module("paths carry different scalings")),
        }
        paths.push(m.clone());
    }
    let beta = beta.unwrap_or(1.0);
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(not_module("residual scaling outside (0, 1]"));
    }
    paths.sort_by_key(Monomial::order);
    Ok(ModuleForm { beta, paths })
}

/// Right-factors shared first-applied blocks. `suffixes` are in application order.
fn factor_prefixes(suffixes: &[Vec<BlockId>]) -> Vec<OperatorExpr> {
    let mut heads: Vec<&BlockId> = Vec::new();
    for s in suffixes {
        if !heads.contains(&&s[0]) {
            heads.push(&s[0]);
        }
    }
    heads
        .into_iter()
        .map(|head| {
            let rests: Vec<Vec<BlockId>> = suffixes
                .iter()
                .filter(|s| &s[0] == head)
                .map(|s| s[1..].to_vec())
                .collect();
            let ends_here = rests.iter().any(Vec::is_empty);
            let longer: Vec<Vec<BlockId>> = rests.into_iter().filter(|r| !r.is_empty()).collect();
            let block = OperatorExpr::Block(head.clone());
            if longer.is_empty() {
                return block;
            }
            let mut inner = Vec::new();
            if ends_here {
                inner.push(OperatorExpr::Identity);
            }
            inner.extend(factor_prefixes(&longer));
            OperatorExpr::compose([OperatorExpr::sum(inner), block])
        })
        .collect()
}

/// Rewrites a module into cascaded form, e.g. `I+F+GF+HGF → I+(I+(I+H)G)F`.
///
/// The result is semantically equal to the input. Modules without shared
/// prefixes (k-way) come back in naive form unchanged.
pub fn cascade(expr: &OperatorExpr) -> Result<OperatorExpr, AlgebraError> {
    let form = module_form(expr)?;
    if form.paths.is_empty() {
        return Ok(OperatorExpr::Identity);
    }
    let applied: Vec<Vec<BlockId>> = form
        .paths
        .iter()
        .map(|m| m.applied().cloned().collect())
        .collect();
    let residual = OperatorExpr::sum(factor_prefixes(&applied));
    Ok(OperatorExpr::sum([
        OperatorExpr::Identity,
        OperatorExpr::scaled(form.beta, residual),
    ]))
}

/// Keeps only the paths whose gate is set. The identity path is never gated.
pub fn drop_paths(expr: &OperatorExpr, gates: &[bool]) -> Result<OperatorExpr, AlgebraError> {
    let form = module_form(expr)?;
    if gates.len() != form.paths.len() {
        return Err(AlgebraError::GateLength { expected: form.paths.len(), got: gates.len() });
    }
    let kept: Vec<Monomial> = form
        .paths
        .iter()
        .zip(gates)
        .filter(|(_, &g)| g)
        .map(|(m, _)| m.clone())
        .collect();
    if kept.len() == form.paths.len() {
        return Ok(expr.clone());
    }
    Ok(naive_from_parts(form.beta, &kept))
}

/// Block evaluations per forward pass.
///
/// Without memoization every written block reference is one evaluation.
/// With memoization every distinct applied prefix (by share key) is
/// evaluated once, which is what the cascaded form achieves.
pub fn block_applications(expr: &OperatorExpr, memoize: bool) -> usize {
    if !memoize {
        let mut n = 0;
        expr.for_each_block(&mut |_| n += 1);
        return n;
    }
    let poly = expand_symbolic(expr);
    let mut prefixes: HashSet<Vec<&str>> = HashSet::new();
    for (_, m) in poly.terms() {
        let keys: Vec<&str> = m.applied().map(|id| id.share_key.as_str()).collect();
        for end in 1..=keys.len() {
            prefixes.insert(keys[..end].to_vec());
        }
    }
    prefixes.len()
}
