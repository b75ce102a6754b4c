//! Experiment configuration: one JSON document with a section per module.

use std::path::{Path, PathBuf};

use hide_core::backbone::{BackboneConfig, PretrainConfig, PromptInjectionPlan};
use hide_core::engine::{AblationConfig, TrainConfig};
use hide_core::harness::{Setting, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives class order and all training randomness.
    #[serde(default)]
    pub seed: u64,
    pub backbone: BackboneSection,
    #[serde(default)]
    pub plan: PromptInjectionPlan,
    pub stream: StreamSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub ablate: AblateSection,
    /// Write a checkpoint after every task.
    #[serde(default)]
    pub snapshots: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackboneSection {
    /// The built-in transformer, loaded from `weights`, pretrained in
    /// process, or left at its seeded random initialization.
    Transformer {
        config: BackboneConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pretrain: Option<PretrainSection>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
    /// Inputs are precomputed embeddings.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default)]
    pub optimizer: PretrainConfig,
    /// Auxiliary classes, disjoint in content from the stream.
    pub data: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub setting: Setting,
    pub tasks: usize,
    pub dataset: DatasetSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSection {
    Synthetic { spec: SynthSpec },
    /// HEMB1 embedding file, split 80/20 per class with a fixed seed.
    Embeddings { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// `None` runs the default six rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<AblationConfig>>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { grid: None, seeds: vec![0, 1, 2] }
    }
}

fn field(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {e}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("{path}: {inner}"))
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| field("--config", format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every precondition that training would otherwise hit late.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.stream.tasks == 0 {
            return Err(field("stream.tasks", "must be positive"));
        }
        self.train.validate().map_err(|e| field("train", e))?;
        if self.ablate.seeds.is_empty() {
            return Err(field("ablate.seeds", "must not be empty"));
        }
        match (&self.backbone, &self.stream.dataset) {
            (BackboneSection::Transformer { config, pretrain, weights }, DatasetSection::Synthetic { spec }) => {
                config.validate().map_err(|e| field("backbone.config", e))?;
                self.plan.validate(config).map_err(|e| field("plan", e))?;
                if spec.image_size != config.image_size {
                    return Err(field("stream.dataset.spec.image_size", "differs from backbone.config.image_size"));
                }
                if spec.channels != config.channels {
                    return Err(field("stream.dataset.spec.channels", "differs from backbone.config.channels"));
                }
                if spec.classes < self.stream.tasks && self.stream.setting != Setting::Dil {
                    return Err(field("stream.tasks", "more tasks than classes"));
                }
                if let Some(p) = pretrain {
                    if p.data.image_size != config.image_size || p.data.channels != config.channels {
                        return Err(field("backbone.pretrain.data", "image shape differs from backbone.config"));
                    }
                    if p.optimizer.batch == 0 {
                        return Err(field("backbone.pretrain.optimizer.batch", "must be positive"));
                    }
                }
                if let Some(w) = weights {
                    if !w.is_file() {
                        return Err(field("backbone.weights", format!("no such file {}", w.display())));
                    }
                }
            }
            (BackboneSection::Embedding, DatasetSection::Embeddings { path }) => {
                if !path.is_file() {
                    return Err(field("stream.dataset.path", format!("no such file {}", path.display())));
                }
            }
            (BackboneSection::Embedding, _) => {
                return Err(field("backbone.kind", "embedding needs an embeddings dataset"));
            }
            (_, DatasetSection::Embeddings { .. }) => {
                return Err(field("stream.dataset.kind", "embeddings need an embedding backbone"));
            }
        }
        Ok(())
    }

    /// Canonical JSON, sufficient to reproduce the run.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
