//! Run configuration: one JSON document, with command-line flags on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniultra_core::data::GenConfig;
use uniultra_core::distill::{DistillConfig, Level};
use uniultra_core::edge::Direction;
use uniultra_core::train::TrainConfig;
use uniultra_core::ModelConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source for data, init, ordering and jitter streams.
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub generate: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: None,
            out: None,
            teacher: ModelConfig::toy_teacher(),
            student: ModelConfig::toy_student(),
            train: TrainConfig {
                lr: 1e-3,
                box_jitter: 4,
                augment: true,
                ..TrainConfig::default()
            },
            distill: DistillConfig::default(),
            generate: GenConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` or starts from the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))
    }

    /// Propagates the seed and checks every section.
    pub fn finish(mut self) -> Result<Self, UsageError> {
        self.train.seed = self.seed;
        self.distill.seed = self.seed;
        let bad = |e: uniultra_core::Error| UsageError(e.to_string());
        self.teacher.validate().map_err(bad)?;
        self.student.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        self.distill.validate().map_err(bad)?;
        if self.train.epochs == 0 {
            return Err(UsageError("train.epochs must be positive".into()));
        }
        Ok(self)
    }
}

/// `none`, `all`, or a comma list of `horizontal`, `vertical`,
/// `right_diagonal`, `left_diagonal` (short forms `h`, `v`, `rd`, `ld`).
pub fn parse_directions(s: &str) -> Result<Vec<Direction>, String> {
    match s.trim() {
        "none" | "" => return Ok(Vec::new()),
        "all" => return Ok(Direction::ALL.to_vec()),
        _ => {}
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let d = match part {
            "h" | "horizontal" => Direction::Horizontal,
            "v" | "vertical" => Direction::Vertical,
            "rd" | "right_diagonal" => Direction::RightDiagonal,
            "ld" | "left_diagonal" => Direction::LeftDiagonal,
            other => return Err(format!("unknown direction {other:?}")),
        };
        if out.contains(&d) {
            return Err(format!("direction {part:?} listed twice"));
        }
        out.push(d);
    }
    Ok(out)
}

/// Comma list of `d1`, `d2`, `d3`.
pub fn parse_levels(s: &str) -> Result<Vec<Level>, String> {
    s.split(',')
        .map(str::trim)
        .map(|p| match p {
            "d1" => Ok(Level::D1),
            "d2" => Ok(Level::D2),
            "d3" => Ok(Level::D3),
            other => Err(format!("unknown level {other:?} (d1, d2 or d3)")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"seed": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "train": {"epochs": 5}}"#).unwrap();
        let c = c.finish().unwrap();
        assert_eq!((c.train.epochs, c.train.seed, c.distill.seed), (5, 3, 3));
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let mut c = RunConfig::default();
        c.distill.levels.clear();
        assert!(c.finish().is_err());
        let mut c = RunConfig::default();
        c.teacher.adapter_dim = 1000;
        assert!(c.finish().is_err());
    }

    #[test]
    fn direction_and_level_lists() {
        assert_eq!(parse_directions("none").unwrap(), vec![]);
        assert_eq!(parse_directions("h,ld").unwrap(), vec![Direction::Horizontal, Direction::LeftDiagonal]);
        assert_eq!(parse_directions("all").unwrap().len(), 4);
        assert!(parse_directions("h,h").is_err());
        assert!(parse_directions("up").is_err());
        assert_eq!(parse_levels("d1,d3").unwrap(), vec![Level::D1, Level::D3]);
        assert!(parse_levels("d4").is_err());
    }
}
