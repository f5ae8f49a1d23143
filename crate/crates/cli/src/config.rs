//! Experiment and plan files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use proctrain::model::{Checkpoint, ModelConfig};
use proctrain::procgen::ProceduralTask;
use proctrain::store;
use proctrain::surgery::TransferPlan;
use proctrain::training::{Scale, TrainConfig};
use serde::Deserialize;

/// Architecture overrides for pretraining; unset fields keep the preset model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(n) = self.n_layers {
            cfg.n_layers = n;
        }
        if let Some(h) = self.n_heads {
            cfg.n_heads = h;
        }
        if let Some(d) = self.d_model {
            cfg.d_model = d;
            cfg.d_ff = 4 * d;
        }
        cfg
    }
}

/// One experiment. Command-line flags take precedence over file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pretrain_task: Option<String>,
    pub finetune_task: Option<String>,
    pub preset: Option<String>,
    pub scale: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub label: Option<String>,
    #[serde(default)]
    pub model: ModelOverrides,
    /// Field overrides on top of the preset, checked against the full schema.
    #[serde(default)]
    pub train: toml::Table,
    pub transfer_plan: Option<TransferPlan>,
    /// Donor name to checkpoint path.
    #[serde(default)]
    pub donors: BTreeMap<String, PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing experiment config {}", path.display()))
    }
}

pub fn parse_scale(s: Option<&str>) -> Result<Scale> {
    Ok(Scale::parse(s.unwrap_or("desk"))?)
}

/// Preset with `overrides` merged in; unknown keys are an error.
pub fn train_config(preset: &str, scale: Scale, overrides: &toml::Table) -> Result<TrainConfig> {
    let base = TrainConfig::preset(preset, scale)?;
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut table = toml::Table::try_from(&base).context("serialising preset")?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let cfg: TrainConfig = table
        .try_into()
        .with_context(|| format!("applying [train] overrides to preset `{preset}`"))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain_preset(task: ProceduralTask) -> &'static str {
    match task {
        ProceduralTask::Dyck { .. } | ProceduralTask::DyckShuffle { .. } => "pretrain-dyck",
        ProceduralTask::Stack => "pretrain-stack",
        ProceduralTask::Identity => "pretrain-identity",
        ProceduralTask::Set => "pretrain-set",
        ProceduralTask::Eca => "pretrain-eca",
    }
}

pub fn finetune_preset(task: &str) -> &'static str {
    match task {
        "multiplication" => "ft-multiplication",
        "language-modelling" | "lm" => "ft-lm",
        _ => "ft-algorithmic",
    }
}

pub fn load_plan(path: &Path) -> Result<TransferPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    let plan: TransferPlan = toml::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?;
    plan.validate()?;
    Ok(plan)
}

/// `NAME=PATH` pairs (plus any from a config file), loaded from disk.
pub fn load_donors(flags: &[String], extra: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<String, Checkpoint>> {
    let mut paths = extra.clone();
    for f in flags {
        let Some((name, path)) = f.split_once('=') else {
            bail!("--donor expects NAME=PATH, got `{f}`");
        };
        if name.is_empty() {
            bail!("--donor `{f}` has an empty name");
        }
        paths.insert(name.to_string(), PathBuf::from(path));
    }
    paths
        .into_iter()
        .map(|(name, path)| {
            let ck = store::load(&path).with_context(|| format!("loading donor `{name}` from {}", path.display()))?;
            Ok((name, ck))
        })
        .collect()
}
