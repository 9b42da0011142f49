//! von Mises-Fisher statistics on the unit sphere: unnormalized density,
//! the mean-direction / concentration estimator, and the dataset
//! log-likelihood whose negative matches the contrastive loss.

use serde::{Deserialize, Serialize};

use crate::contrastive::{embed_all, Dataset};
use crate::error::{Error, Result};
use crate::net::{norm, NetSpec, ParamVector};

/// Upper clamp for the concentration estimate, which diverges as `R̄ → 1`.
pub const K_MAX: f64 = 1e6;

const UNIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfEstimate {
    /// Mean direction; `None` when the resultant length vanishes.
    pub mu: Option<Vec<f64>>,
    pub r_bar: f64,
    pub kappa: f64,
    pub n_samples: usize,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Argument(format!("{what} must be unit-norm, has norm {n}")));
    }
    Ok(())
}

/// `−κ‖z − μ‖²/2`; the normalizer depends on κ alone and is omitted.
pub fn vmf_log_density_unnorm(z: &[f64], mu: &[f64], kappa: f64) -> Result<f64> {
    if z.len() != mu.len() {
        return Err(Error::Dimension {
            what: "vmf mean",
            expected: z.len(),
            got: mu.len(),
        });
    }
    check_unit(z, "z")?;
    check_unit(mu, "mu")?;
    if !(kappa >= 0.0) {
        return Err(Error::Argument(format!("kappa must be nonnegative, got {kappa}")));
    }
    let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * kappa * sq)
}

/// `κ̄ = R̄(D − R̄²)/(1 − R̄²)`, clamped to `[0, K_MAX]`.
pub fn kappa_from_resultant(r_bar: f64, dim: usize) -> f64 {
    if r_bar > 1.0 - 1e-12 {
        return K_MAX;
    }
    let r2 = r_bar * r_bar;
    let k = r_bar * (dim as f64 - r2) / (1.0 - r2);
    k.clamp(0.0, K_MAX)
}

pub fn vmf_estimate(samples: &[Vec<f64>]) -> Result<VmfEstimate> {
    if samples.len() < 2 {
        return Err(Error::Argument(format!(
            "vmf estimation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        if s.len() != d {
            return Err(Error::Dimension {
                what: "vmf sample",
                expected: d,
                got: s.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let r_bar = norm(&mean).min(1.0);
    if r_bar < 1e-12 {
        return Ok(VmfEstimate {
            mu: None,
            r_bar,
            kappa: 0.0,
            n_samples: samples.len(),
        });
    }
    Ok(VmfEstimate {
        mu: Some(mean.iter().map(|m| m / r_bar).collect()),
        r_bar,
        kappa: kappa_from_resultant(r_bar, d),
        n_samples: samples.len(),
    })
}

/// θ-dependent part of `log P(𝒟|θ)` over ordered pairs: attractive terms
/// `−κ‖z_i − z_j‖²/2` for positives and repulsive terms `−κ‖z_i + z_j‖²/2`
/// for negatives. Every negative is treated as inside the margin.
pub fn dataset_log_likelihood(spec: &NetSpec, params: &ParamVector, dataset: &Dataset, kappa: f64) -> Result<f64> {
    let z = embed_all(spec, params, dataset)?;
    let labels = dataset.labels();
    let mut total = 0.0;
    for i in 0..z.len() {
        for j in 0..z.len() {
            let sign = if labels[i] == labels[j] { -1.0 } else { 1.0 };
            let sq: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| (a + sign * b).powi(2)).sum();
            total -= 0.5 * kappa * sq;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_cases() {
        let mu = [0.0, 1.0, 0.0];
        assert_eq!(vmf_log_density_unnorm(&mu, &mu, 3.0).unwrap(), 0.0);
        assert_eq!(vmf_log_density_unnorm(&[0.0, -1.0, 0.0], &mu, 3.0).unwrap(), -6.0);
        assert_eq!(vmf_log_density_unnorm(&[1.0, 0.0, 0.0], &mu, 0.0).unwrap(), 0.0);
        assert!(vmf_log_density_unnorm(&[2.0, 0.0, 0.0], &mu, 1.0).is_err());
    }

    #[test]
    fn identical_samples_hit_the_clamp() {
        let s = vec![vec![0.6, 0.8]; 5];
        let e = vmf_estimate(&s).unwrap();
        assert_eq!(e.kappa, K_MAX);
        assert!((e.r_bar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antipodal_samples_have_zero_concentration() {
        let e = vmf_estimate(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(e.r_bar, 0.0);
        assert_eq!(e.kappa, 0.0);
        assert!(e.mu.is_none());
    }

    #[test]
    fn hand_evaluated_kappa() {
        // 0.9·(3 − 0.81)/(1 − 0.81) = 1.971/0.19
        let k = kappa_from_resultant(0.9, 3);
        assert!((k - 1.971 / 0.19).abs() < 1e-12);
        assert!((k - 10.374).abs() < 1e-3);
    }

    #[test]
    fn needs_two_samples() {
        assert!(vmf_estimate(&[vec![1.0, 0.0]]).is_err());
    }
}
