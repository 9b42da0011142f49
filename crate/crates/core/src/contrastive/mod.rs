//! Contrastive loss over ordered pairs on the unit sphere: targets,
//! gradients, output-space Hessians, GGN diagonals and mining.

pub mod hessian;
pub mod loss;
pub mod mining;
pub mod pairs;

use serde::{Deserialize, Serialize};

pub use hessian::{dense_ggn, ggn_hessian_diag, HessianApprox, HessianDiag, HessianVariant};
pub use loss::{
    dataset_loss, dataset_loss_with_form, embed_all, loss_gradient, loss_gradient_with_form, pair_gradient_output,
    pair_hessian_blocks, pair_hessian_output, per_pair_loss, LossForm, PairHessianBlocks,
};
pub use mining::{mine_pairs, MiningConfig, MiningStrategy};
pub use pairs::{
    classify_pair, classify_pairs, full_targets, minibatch_targets, minibatch_targets_for_mode, pair_counts,
    BatchCounts, Dataset, LabeledPoint, MarginConfig, MarginConvention, Pair, PairBatch, PairKind, TargetMode,
};

pub use crate::net::Split as DistanceSplit;

use crate::error::Result;
use crate::net::{NetSpec, ParamVector, Split};

/// Loss settings shared by training, Hessian fitting and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ContrastiveConfig {
    #[serde(default)]
    pub margin: MarginConfig,
    #[serde(default)]
    pub target_mode: TargetMode,
    #[serde(default)]
    pub split: Split,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        self.target_mode.validate()
    }

    /// All `N²` ordered pairs of `dataset`, classified at `params`.
    pub fn full_batch(&self, spec: &NetSpec, params: &ParamVector, dataset: &Dataset) -> Result<PairBatch> {
        let z = embed_all(spec, params, dataset)?;
        full_targets(&z, &dataset.labels(), &self.margin, &self.target_mode)
    }
}
