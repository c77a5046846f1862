use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AlgebraError;

/// A residual block reference.
///
/// `name` is the display letter (`F`, `G`, ...). `share_key` identifies the
/// parameters: two references with the same share key bind the same weights.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub name: String,
    pub share_key: String,
}

impl BlockId {
    pub fn new(name: impl Into<String>, share_key: impl Into<String>) -> Self {
        BlockId { name: name.into(), share_key: share_key.into() }
    }

    /// A block whose share key is its own name.
    pub fn local(name: impl Into<String>) -> Self {
        let name = name.into();
        BlockId { share_key: name.clone(), name }
    }
}

/// Symbolic operator polynomial over residual blocks.
///
/// `Compose([G, F])` applies `F` first, then `G`, so written order matches
/// the usual operator notation `GF`.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorExpr {
    Identity,
    Block(BlockId),
    Sum(Vec<OperatorExpr>),
    Compose(Vec<OperatorExpr>),
    Scaled(f64, Box<OperatorExpr>),
}

impl OperatorExpr {
    pub fn block(id: BlockId) -> Self {
        OperatorExpr::Block(id)
    }

    /// Builds a sum, flattening nested sums. A single term is returned as is.
    pub fn sum(terms: impl IntoIterator<Item = OperatorExpr>) -> Self {
        let mut flat = Vec::new();
        for term in terms {
            match term {
                OperatorExpr::Sum(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => panic!("empty operator sum"),
            1 => flat.pop().unwrap(),
            _ => OperatorExpr::Sum(flat),
        }
    }

    /// Builds a composition (leftmost applied last), flattening nested
    /// compositions and dropping identity factors.
    pub fn compose(factors: impl IntoIterator<Item = OperatorExpr>) -> Self {
        let mut flat = Vec::new();
        for factor in factors {
            match factor {
                OperatorExpr::Identity => {}
                OperatorExpr::Compose(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => OperatorExpr::Identity,
            1 => flat.pop().unwrap(),
            _ => OperatorExpr::Compose(flat),
        }
    }

    /// `beta == 1` emits no wrapper.
    pub fn scaled(beta: f64, inner: OperatorExpr) -> Self {
        if beta == 1.0 {
            inner
        } else {
            OperatorExpr::Scaled(beta, Box::new(inner))
        }
    }

    /// Identity, a block reference, or a composition of block references.
    pub fn is_monomial(&self) -> bool {
        match self {
            OperatorExpr::Identity | OperatorExpr::Block(_) => true,
            OperatorExpr::Compose(factors) => {
                factors.iter().all(|f| matches!(f, OperatorExpr::Block(_)))
            }
            _ => false,
        }
    }

    /// Visits every block reference in written order.
    pub fn for_each_block(&self, f: &mut impl FnMut(&BlockId)) {
        match self {
            OperatorExpr::Identity => {}
            OperatorExpr::Block(id) => f(id),
            OperatorExpr::Sum(items) | OperatorExpr::Compose(items) => {
                items.iter().for_each(|e| e.for_each_block(f))
            }
            OperatorExpr::Scaled(_, inner) => inner.for_each_block(f),
        }
    }

    /// Rewrites every block reference.
    pub fn map_blocks(&self, f: &impl Fn(&BlockId) -> BlockId) -> OperatorExpr {
        match self {
            OperatorExpr::Identity => OperatorExpr::Identity,
            OperatorExpr::Block(id) => OperatorExpr::Block(f(id)),
            OperatorExpr::Sum(items) => {
                OperatorExpr::Sum(items.iter().map(|e| e.map_blocks(f)).collect())
            }
            OperatorExpr::Compose(items) => {
                OperatorExpr::Compose(items.iter().map(|e| e.map_blocks(f)).collect())
            }
            OperatorExpr::Scaled(beta, inner) => {
                OperatorExpr::Scaled(*beta, Box::new(inner.map_blocks(f)))
            }
        }
    }

    /// Distinct share keys in first-occurrence order.
    pub fn share_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        self.for_each_block(&mut |id| {
            if !keys.contains(&id.share_key) {
                keys.push(id.share_key.clone());
            }
        });
        keys
    }
}

/// Residual module family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    /// Plain residual unit `I + F`.
    Ir,
    /// `I + F + F² + … + Fᵏ`, one shared block.
    Poly(u32),
    /// `I + F + GF + HGF + …`, distinct blocks along a prefix chain.
    MPoly(u32),
    /// `I + F + G + H + …`, parallel first-order paths.
    KWay(u32),
}

impl ModuleKind {
    pub fn order(&self) -> u32 {
        match *self {
            ModuleKind::Ir => 1,
            ModuleKind::Poly(k) | ModuleKind::MPoly(k) | ModuleKind::KWay(k) => k,
        }
    }

    /// Number of non-identity paths.
    pub fn paths(&self) -> usize {
        self.order() as usize
    }

    /// Number of distinct parameter sets.
    pub fn distinct_blocks(&self) -> usize {
        match *self {
            ModuleKind::Ir | ModuleKind::Poly(_) => 1,
            ModuleKind::MPoly(k) | ModuleKind::KWay(k) => k as usize,
        }
    }

    /// The six first-and-second/third-order kinds used by the stage ablation grid.
    pub fn ablation_kinds() -> [ModuleKind; 6] {
        [
            ModuleKind::KWay(2),
            ModuleKind::KWay(3),
            ModuleKind::Poly(2),
            ModuleKind::Poly(3),
            ModuleKind::MPoly(2),
            ModuleKind::MPoly(3),
        ]
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleKind::Ir => write!(f, "ir"),
            ModuleKind::Poly(k) => write!(f, "poly-{k}"),
            ModuleKind::MPoly(k) => write!(f, "mpoly-{k}"),
            ModuleKind::KWay(k) => write!(f, "{k}-way"),
        }
    }
}

impl FromStr for ModuleKind {
    type Err = AlgebraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let order = |digits: &str| -> Result<u32, AlgebraError> {
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(AlgebraError::UnknownKind(s.to_string()));
            }
            let k: u32 = digits.parse().map_err(|_| AlgebraError::UnknownKind(s.to_string()))?;
            if k == 0 {
                return Err(AlgebraError::ZeroOrder);
            }
            Ok(k)
        };
        if s == "ir" {
            Ok(ModuleKind::Ir)
        } else if let Some(rest) = s.strip_prefix("mpoly-") {
            Ok(ModuleKind::MPoly(order(rest)?))
        } else if let Some(rest) = s.strip_prefix("poly-") {
            Ok(ModuleKind::Poly(order(rest)?))
        } else if let Some(rest) = s.strip_suffix("-way") {
            Ok(ModuleKind::KWay(order(rest)?))
        } else {
            Err(AlgebraError::UnknownKind(s.to_string()))
        }
    }
}

impl Serialize for OperatorExpr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OperatorExpr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
