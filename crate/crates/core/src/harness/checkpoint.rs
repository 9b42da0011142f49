//! Checkpoints: a JSON envelope with base64-encoded little-endian `f64`
//! arrays, exact under round-trip.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::FORMAT_VERSION;
use crate::laplace::GaussianPosterior;
use crate::net::{NetSpec, ParamVector};

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Map,
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    kind: CheckpointKind,
    spec: NetSpec,
    config_hash: String,
    /// Full parameter vector; for posteriors the active range holds the mean.
    params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    precision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_prior: Option<f64>,
    #[serde(default)]
    clamped: usize,
    #[serde(default)]
    floored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Map { spec: NetSpec, params: ParamVector, config_hash: String },
    Posterior { posterior: GaussianPosterior, config_hash: String },
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Map { .. } => CheckpointKind::Map,
            Checkpoint::Posterior { .. } => CheckpointKind::Posterior,
        }
    }

    pub fn config_hash(&self) -> &str {
        match self {
            Checkpoint::Map { config_hash, .. } | Checkpoint::Posterior { config_hash, .. } => config_hash,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let env = match self {
            Checkpoint::Map { spec, params, config_hash } => Envelope {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Map,
                spec: spec.clone(),
                config_hash: config_hash.clone(),
                params: encode_f64s(params.as_slice()),
                active: None,
                precision: None,
                sigma_prior: None,
                clamped: 0,
                floored: 0,
            },
            Checkpoint::Posterior { posterior, config_hash } => Envelope {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Posterior,
                spec: posterior.spec.clone(),
                config_hash: config_hash.clone(),
                params: encode_f64s(posterior.params.as_slice()),
                active: Some([posterior.active.start, posterior.active.end]),
                precision: Some(encode_f64s(&posterior.precision_diag)),
                sigma_prior: Some(posterior.prior_sigma),
                clamped: posterior.clamped,
                floored: posterior.floored,
            },
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if env.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                env.format_version
            )));
        }
        env.spec.validate()?;
        let params = ParamVector(decode_f64s(&env.params)?);
        params.check(&env.spec)?;
        match env.kind {
            CheckpointKind::Map => Ok(Checkpoint::Map {
                spec: env.spec,
                params,
                config_hash: env.config_hash,
            }),
            CheckpointKind::Posterior => {
                let missing = |f: &str| Error::Checkpoint(format!("posterior checkpoint lacks `{f}`"));
                let [start, end] = env.active.ok_or_else(|| missing("active"))?;
                let posterior = GaussianPosterior {
                    spec: env.spec,
                    params,
                    active: start..end,
                    precision_diag: decode_f64s(env.precision.as_deref().ok_or_else(|| missing("precision"))?)?,
                    prior_sigma: env.sigma_prior.ok_or_else(|| missing("sigma_prior"))?,
                    clamped: env.clamped,
                    floored: env.floored,
                };
                posterior.validate()?;
                Ok(Checkpoint::Posterior {
                    posterior,
                    config_hash: env.config_hash,
                })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_arrays_round_trip_bit_exactly(values in prop::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_f64s(&encode_f64s(&values)).unwrap();
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        assert!(decode_f64s(&STANDARD.encode([0u8; 7])).is_err());
    }
}
