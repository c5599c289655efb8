//! Run configuration: presets, TOML snapshots and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use rrank::data::Task;
use rrank::model::ModelConfig;
use rrank::objectives::{Mode, ObjectiveConfig};
use rrank::ordering::Strategy;
use rrank::train::TrainConfig;
use rrank::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-scale settings: lr 2e-5, effective batch 64 over 4 simulated replicas.
    Full,
    /// Larger learning rate and batch 8, sized for a randomly initialised
    /// model on one core.
    Desk,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

/// Architecture knobs. Vocabulary size and context length are derived from
/// the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::new(2, 0);
        ModelShape {
            embed_dim: d.embed_dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
        }
    }
}

impl ModelShape {
    pub fn model_config(self, vocab_size: usize, context_len: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            seed,
        }
    }
}

/// Everything `train` needs. The snapshot written next to the checkpoint
/// reproduces the run when passed back with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub strategy: Strategy,
    pub model: ModelShape,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        RunConfig {
            task: Task::Nli,
            data: PathBuf::new(),
            init: None,
            out_dir: PathBuf::from("."),
            strategy: Strategy::PoLabel,
            model: ModelShape::default(),
            objective: ObjectiveConfig::default(),
            train: preset.train_config(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks task/strategy compatibility and forces ranking-only training
    /// on multi-document QA, which has no reference answer to imitate.
    /// `explicit_mode` is the mode given on the command line, if any.
    pub fn resolve(&mut self, explicit_mode: Option<Mode>) -> Result<()> {
        if self.task == Task::Multidoc {
            if self.strategy.needs_human() {
                return Err(Error::Config(format!(
                    "strategy {} needs human responses, which multidoc data does not have",
                    self.strategy.as_str()
                )));
            }
            match explicit_mode {
                Some(m) if m != Mode::RankOnly => {
                    return Err(Error::Config(format!(
                        "multidoc trains with rank_only; --mode {} is not allowed",
                        m.as_str()
                    )))
                }
                _ => self.objective.mode = Mode::RankOnly,
            }
        }
        self.objective.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::from_preset(Preset::Desk);
        c.data = "train.jsonl".into();
        c.init = Some("base/model.ckpt".into());
        c.train.seed = 7;
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn multidoc_forces_rank_only() {
        let mut c = RunConfig::from_preset(Preset::Desk);
        c.task = Task::Multidoc;
        c.resolve(None).unwrap();
        assert_eq!(c.objective.mode, Mode::RankOnly);
        assert!(matches!(c.clone().resolve(Some(Mode::Combined)), Err(Error::Config(_))));
        c.strategy = Strategy::PoHuman;
        assert!(matches!(c.resolve(None), Err(Error::Config(_))));
    }
}
