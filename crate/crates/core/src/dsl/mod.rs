//! Architecture description strings.
//!
//! ```text
//! network := stage (';' stage)*
//! stage   := NAME ':' chain
//! chain   := group ('->' group)*
//! group   := module | '(' chain ')' 'x' INT
//! module  := 'ir' | 'poly-'INT | 'mpoly-'INT | INT'-way'
//! ```
//!
//! `→` and `×` are accepted for `->` and `x`, `#` starts a line comment, and
//! `IR a-b-c` is shorthand for stages `A`, `B`, `C` of plain residual units.

mod parse;
mod presets;
mod render;

pub use parse::parse_network;
pub use presets::{preset, PRESET_NAMES};
pub use render::render_network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::ModuleKind;

pub const DEFAULT_INPUT_SIZE: usize = 32;
pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_BASE_WIDTH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("{line}:{column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("{line}:{column}: unknown module token '{token}'")]
    UnknownModule { line: usize, column: usize, token: String },
    #[error("{line}:{column}: repetition count must be at least 1")]
    ZeroRepeat { line: usize, column: usize },
    #[error("duplicate stage name '{0}'")]
    DuplicateStage(String),
    #[error("stage '{0}' has no modules")]
    EmptyStage(String),
    #[error("network has no stages")]
    Empty,
    #[error("stage '{stage}' width must be positive")]
    BadWidth { stage: String },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub modules: Vec<ModuleKind>,
    /// Channels (conv blocks) or features (dense blocks).
    pub width: usize,
    /// Spatial side length the stage operates on.
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    pub input_size: usize,
    pub classes: usize,
}

impl NetworkConfig {
    /// Builds a config with default geometry: widths double per stage,
    /// resolutions halve (the stem already downsamples once).
    pub fn from_stages(stages: Vec<(String, Vec<ModuleKind>)>) -> Result<Self, DslError> {
        let stages = stages
            .into_iter()
            .map(|(name, modules)| StageConfig { name, modules, width: 0, resolution: 0 })
            .collect();
        let mut cfg = NetworkConfig { stages, input_size: DEFAULT_INPUT_SIZE, classes: DEFAULT_CLASSES };
        cfg.relayout(DEFAULT_BASE_WIDTH);
        cfg.validate()?;
        Ok(cfg)
    }

    fn relayout(&mut self, base_width: usize) {
        let input = self.input_size;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.width = base_width << i;
            stage.resolution = (input >> (i + 1)).max(1);
        }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.relayout(base_width);
        self
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        let base = self.stages.first().map_or(DEFAULT_BASE_WIDTH, |s| s.width);
        self.input_size = input_size;
        self.relayout(base);
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn validate(&self) -> Result<(), DslError> {
        if self.stages.is_empty() {
            return Err(DslError::Empty);
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.modules.is_empty() {
                return Err(DslError::EmptyStage(s.name.clone()));
            }
            if s.width == 0 {
                return Err(DslError::BadWidth { stage: s.name.clone() });
            }
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(DslError::DuplicateStage(s.name.clone()));
            }
        }
        Ok(())
    }

    pub fn module_count(&self) -> usize {
        self.stages.iter().map(|s| s.modules.len()).sum()
    }

    /// `(stage index, index within stage, kind)` in network order.
    pub fn modules(&self) -> impl Iterator<Item = (usize, usize, ModuleKind)> + '_ {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(si, s)| s.modules.iter().enumerate().map(move |(mi, k)| (si, mi, *k)))
    }

    /// Replaces every module of one stage with `kind`.
    pub fn with_stage_kind(mut self, stage: usize, kind: ModuleKind) -> Self {
        for m in &mut self.stages[stage].modules {
            *m = kind;
        }
        self
    }
}

impl std::fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&render_network(self))
    }
}

impl std::str::FromStr for NetworkConfig {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_network(s)
    }
}
