//! The JSON metrics report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval::{CalibrationBin, EceWeighting};
use crate::harness::config::FORMAT_VERSION;

pub const MAP_VARIANT: &str = "ap_at_k_normalized_by_min_relevant_k";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemUncertainty {
    pub id: String,
    pub label: u32,
    pub kappa: f64,
    pub r_bar: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportCounts {
    pub n_index: usize,
    pub n_queries: usize,
    pub n_ood: usize,
    pub n_samples: usize,
    /// Hessian entries clamped at zero while fitting the posterior.
    pub hessian_clamped: usize,
    /// Precision entries raised to the positive floor.
    pub precision_floored: usize,
    /// Items whose concentration estimate hit the upper clamp.
    pub kappa_clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub software_version: String,
    /// Seconds since the Unix epoch; excluded from determinism checks.
    pub timestamp: Option<u64>,
    pub config_hash: String,
    pub seed: u64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub map_at_k: BTreeMap<usize, f64>,
    pub map_variant: String,
    pub ausc: Option<f64>,
    pub sparsification_curve: Option<Vec<f64>>,
    /// AUSC with uncertainties shuffled across queries: the no-information
    /// baseline.
    pub ausc_shuffled: Option<f64>,
    pub ece: Option<f64>,
    pub ece_weighting: EceWeighting,
    pub calibration: Option<Vec<CalibrationBin>>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub kappa_max: f64,
    pub counts: ReportCounts,
}

impl MetricsReport {
    pub fn new(config_hash: String, seed: u64, ece_weighting: EceWeighting) -> Self {
        MetricsReport {
            format_version: FORMAT_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: None,
            config_hash,
            seed,
            recall_at_k: BTreeMap::new(),
            map_at_k: BTreeMap::new(),
            map_variant: MAP_VARIANT.to_string(),
            ausc: None,
            sparsification_curve: None,
            ausc_shuffled: None,
            ece: None,
            ece_weighting,
            calibration: None,
            auroc: None,
            auprc: None,
            kappa_max: crate::vmf::K_MAX,
            counts: ReportCounts::default(),
        }
    }

    pub fn stamp(&mut self) {
        self.timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }

    /// Every scalar metric that is present.
    pub fn metric_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.recall_at_k.values().chain(self.map_at_k.values()).copied().collect();
        v.extend([self.ausc, self.ece, self.auroc, self.auprc].into_iter().flatten());
        v
    }
}
