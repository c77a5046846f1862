use std::fmt;

use super::expr::{BlockId, OperatorExpr};

/// A product of blocks in written order: `GF` is `[G, F]`, applying `F` first.
/// The empty monomial is the identity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial(pub Vec<BlockId>);

impl Monomial {
    pub fn identity() -> Self {
        Monomial(Vec::new())
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// Blocks in the order they are applied to the input.
    pub fn applied(&self) -> impl Iterator<Item = &BlockId> + '_ {
        self.0.iter().rev()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Monomial) -> Monomial {
        let mut blocks = self.0.clone();
        blocks.extend(other.0.iter().cloned());
        Monomial(blocks)
    }

    pub fn to_expr(&self) -> OperatorExpr {
        OperatorExpr::compose(self.0.iter().cloned().map(OperatorExpr::Block))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_expr())
    }
}

/// Fully distributed form: a combination of monomials with real coefficients.
///
/// Terms keep first-appearance order; equality ignores order.
#[derive(Clone, Debug, Default)]
pub struct Polynomial {
    terms: Vec<(f64, Monomial)>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn monomial(coef: f64, m: Monomial) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(coef, m);
        p
    }

    pub fn add_term(&mut self, coef: f64, m: Monomial) {
        if let Some(slot) = self.terms.iter_mut().find(|(_, existing)| *existing == m) {
            slot.0 += coef;
        } else {
            self.terms.push((coef, m));
        }
        self.terms.retain(|(c, _)| *c != 0.0);
    }

    pub fn terms(&self) -> &[(f64, Monomial)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.iter().find(|(_, t)| t == m).map_or(0.0, |(c, _)| *c)
    }

    fn add(mut self, other: Polynomial) -> Polynomial {
        for (c, m) in other.terms {
            self.add_term(c, m);
        }
        self
    }

    fn mul(&self, right: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (a, m) in &self.terms {
            for (b, n) in &right.terms {
                out.add_term(a * b, m.then_after(n));
            }
        }
        out
    }

    fn scale(mut self, beta: f64) -> Polynomial {
        for (c, _) in &mut self.terms {
            *c *= beta;
        }
        self.terms.retain(|(c, _)| *c != 0.0);
        self
    }

    fn sorted(&self) -> Vec<(Monomial, f64)> {
        let mut v: Vec<(Monomial, f64)> =
            self.terms.iter().map(|(c, m)| (m.clone(), *c)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        self.sorted() == other.sorted()
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        write!(f, "{{")?;
        for (c, m) in &self.terms {
            if !first {
                write!(f, ", ")?;
            }
            first = false;
            write!(f, "{c}·{m}")?;
        }
        write!(f, "}}")
    }
}

/// Distributes sums, compositions and scalings into a flat polynomial.
/// Two expressions are semantically equal iff their expansions are equal.
pub fn expand_symbolic(expr: &OperatorExpr) -> Polynomial {
    match expr {
        OperatorExpr::Identity => Polynomial::monomial(1.0, Monomial::identity()),
        OperatorExpr::Block(id) => Polynomial::monomial(1.0, Monomial(vec![id.clone()])),
        OperatorExpr::Sum(terms) => terms
            .iter()
            .map(expand_symbolic)
            .fold(Polynomial::zero(), Polynomial::add),
        OperatorExpr::Compose(factors) => {
            let mut acc = Polynomial::monomial(1.0, Monomial::identity());
            for factor in factors {
                acc = acc.mul(&expand_symbolic(factor));
            }
            acc
        }
        OperatorExpr::Scaled(beta, inner) => expand_symbolic(inner).scale(*beta),
    }
}
