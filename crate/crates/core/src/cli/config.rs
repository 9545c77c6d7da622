use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::proposals::ProposalConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Average scores over flipped and rescaled copies of each image.
    pub multi_view: bool,
    /// Longest-side targets for multi-view scoring.
    pub view_scales: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            multi_view: false,
            view_scales: vec![48, 64, 80],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub report: PathBuf,
    /// Detections written by `eval` for both splits.
    pub detections: PathBuf,
    /// Per-image detections and overlays written by `detect`.
    pub detect_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            checkpoint: "run/model.wten".into(),
            loss_log: "run/loss.log".into(),
            report: "run/report.txt".into(),
            detections: "run/detections.txt".into(),
            detect_dir: "run/detect".into(),
        }
    }
}

/// Everything a command needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub proposals: ProposalConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parses a config file with `key.path=value` overrides applied on top.
    /// Relative paths in `[paths]` resolve against the file's directory.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut table, base) = match file {
            Some(f) => {
                let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
                    file: f.to_path_buf(),
                    offset: e.span().map_or(0, |s| s.start as u64),
                    message: e.message().to_string(),
                })?;
                (table, f.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            let p = &mut cfg.paths;
            for path in [
                &mut p.data_dir,
                &mut p.checkpoint,
                &mut p.loss_log,
                &mut p.report,
                &mut p.detections,
                &mut p.detect_dir,
            ] {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.proposals.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the dataset defines {} classes",
                self.model.num_classes,
                self.dataset.num_classes()
            )));
        }
        if self.model.in_channels != 1 {
            return Err(Error::Config("model.in_channels must be 1 for grayscale data".into()));
        }
        if self.eval.multi_view && self.eval.view_scales.is_empty() {
            return Err(Error::Config("eval.multi_view is on but eval.view_scales is empty".into()));
        }
        let min = self.model.min_input_side();
        let side = self.dataset.width.min(self.dataset.height);
        if side < min {
            return Err(Error::Config(format!("images of side {side} are below the network minimum {min}")));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    // Parse the value as TOML, falling back to a bare string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
