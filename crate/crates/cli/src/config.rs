//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rlvr_core::env::{load_dataset, Dataset};
use rlvr_core::policy::{PolicyDims, PolicyParams};
use rlvr_core::pretrain::{pretrain, PretrainConfig};
use rlvr_core::trainer::TrainConfig;
use rlvr_core::vocab::Vocab;
use serde::{Deserialize, Serialize};

/// How the initial policy is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub seed: u64,
    pub embed: usize,
    pub window: usize,
    /// Start from this checkpoint instead of a fresh policy.
    pub checkpoint: Option<PathBuf>,
    /// Warm-start corpus; when set the fresh policy is pretrained on it.
    pub pretrain_data: Option<PathBuf>,
    pub pretrain: PretrainConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { seed: 0, embed: 32, window: 12, checkpoint: None, pretrain_data: None, pretrain: PretrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a TOML file. Relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data);
        for p in [&mut cfg.heldout, &mut cfg.init.checkpoint, &mut cfg.init.pretrain_data].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let data = load_dataset(&self.data).with_context(|| format!("loading {}", self.data.display()))?;
        let heldout = match &self.heldout {
            Some(p) => Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        Ok((data, heldout))
    }

    pub fn initial_policy(&self) -> Result<PolicyParams> {
        let init = &self.init;
        if let Some(ckpt) = &init.checkpoint {
            let c = rlvr_core::checkpoint::Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            return Ok(c.params);
        }
        let vocab = Vocab::standard();
        let dims = PolicyDims::new(vocab.len(), init.embed, init.window)?;
        let fresh = PolicyParams::init(dims, init.seed);
        match &init.pretrain_data {
            Some(p) => {
                let corpus = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
                Ok(pretrain(&fresh, &corpus, &vocab, &init.pretrain)?)
            }
            None => Ok(fresh),
        }
    }
}
