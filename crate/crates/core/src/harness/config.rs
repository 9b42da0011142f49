//! Run configuration: one JSON document that pins every hyperparameter of
//! an experiment, plus its stable hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{ContrastiveConfig, HessianApprox, MiningConfig, MiningStrategy};
use crate::error::{Error, Result};
use crate::eval::EceWeighting;
use crate::harness::data::BlobConfig;
use crate::laplace::{OnlineConfig, TrainConfig};
use crate::net::{Activation, ActiveSubset, NetSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Posterior samples per item for κ̄ and ECE.
    pub n_samples: usize,
    pub ece_bins: usize,
    #[serde(default)]
    pub ece_weighting: EceWeighting,
    /// Sparsification grid size; `None` removes one query at a time.
    #[serde(default)]
    pub sparsification_grid: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            n_samples: 100,
            ece_bins: 15,
            ece_weighting: EceWeighting::Weighted,
            sparsification_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub net: NetSpec,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub hessian: HessianApprox,
    pub prior_sigma: f64,
    #[serde(default)]
    pub posterior_subset: ActiveSubset,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    /// Pairs used for the post-hoc Hessian; `None` uses every ordered pair.
    #[serde(default)]
    pub posthoc_mining: Option<MiningConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub data: BlobConfig,
    pub seed: u64,
}

/// Random mining of 500 positive and 500 negative ordered pairs per step.
fn default_mining() -> Option<MiningConfig> {
    Some(MiningConfig {
        n_pos: 500,
        n_neg: 500,
        strategy: MiningStrategy::Random,
        chunk_size: None,
    })
}

/// The pinned reference run on the synthetic blobs.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            net: NetSpec {
                layer_dims: vec![2, 16, 16, 3],
                activation: Activation::Tanh,
                normalize_output: true,
            },
            contrastive: ContrastiveConfig::default(),
            hessian: HessianApprox::default(),
            prior_sigma: 0.01,
            posterior_subset: ActiveSubset::LastLayer,
            train: TrainConfig {
                mining: default_mining(),
                ..TrainConfig::default()
            },
            online: OnlineConfig {
                mining: default_mining(),
                ..OnlineConfig::default()
            },
            posthoc_mining: None,
            eval: EvalConfig::default(),
            data: BlobConfig::default(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("config {}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported config format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.net.validate()?;
        if !self.net.normalize_output {
            return Err(Error::Argument("embedding networks must end in the ℓ2 layer".into()));
        }
        self.contrastive.validate()?;
        self.hessian.validate()?;
        if !(self.prior_sigma > 0.0 && self.prior_sigma.is_finite()) {
            return Err(Error::Argument("prior_sigma must be positive".into()));
        }
        self.posterior_subset.resolve(&self.net)?;
        self.train.train_subset.resolve(&self.net)?;
        if !(self.train.lambda > 0.0) {
            return Err(Error::Argument("train.lambda must be positive".into()));
        }
        self.online.validate()?;
        self.online.train_subset.resolve(&self.net)?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Argument("eval.ks must be non-empty and positive".into()));
        }
        if self.eval.n_samples < 2 {
            return Err(Error::Argument("eval.n_samples must be at least 2".into()));
        }
        if self.eval.ece_bins == 0 {
            return Err(Error::Argument("eval.ece_bins must be positive".into()));
        }
        if self.data.dim != self.net.input_dim() {
            return Err(Error::Argument(format!(
                "data.dim {} does not match the network input {}",
                self.data.dim,
                self.net.input_dim()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Independent stream seeds derived from the run seed.
    pub fn derived_seed(&self, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }
}

pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const MAP: u64 = 3;
    pub const ONLINE: u64 = 4;
    pub const SAMPLES: u64 = 5;
    pub const POSTHOC: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_mismatched_input_dim() {
        let mut cfg = RunConfig::default();
        cfg.data.dim = 5;
        assert!(cfg.validate().is_err());
    }
}
