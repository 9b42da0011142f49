//! Diagonal Generalized Gauss-Newton Hessian of the contrastive loss and
//! the approximations that keep it positive semi-definite.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contrastive::loss::{pair_hessian_blocks, point_jacobians, point_outputs};
use crate::contrastive::pairs::{Dataset, PairBatch, PairKind};
use crate::error::{Error, Result};
use crate::net::{ActiveSubset, NetSpec, ParamVector, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HessianVariant {
    /// Negative pairs are dropped.
    Pos,
    /// Cross blocks between the two points of a pair are dropped.
    Fix,
    /// All blocks kept; the accumulated diagonal is clamped at zero.
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianApprox {
    pub variant: HessianVariant,
    /// Mining correction weight in `[0, 1]`; 0.5 leaves the pair sums
    /// unweighted.
    pub w_n: f64,
}

impl Default for HessianApprox {
    fn default() -> Self {
        HessianApprox::new(HessianVariant::Full)
    }
}

impl HessianApprox {
    /// Variant with its default mining weight (0 for `pos`, 0.5 otherwise).
    pub fn new(variant: HessianVariant) -> Self {
        let w_n = match variant {
            HessianVariant::Pos => 0.0,
            HessianVariant::Fix | HessianVariant::Full => 0.5,
        };
        HessianApprox { variant, w_n }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w_n) {
            return Err(Error::Argument(format!("w_n must lie in [0, 1], got {}", self.w_n)));
        }
        Ok(())
    }

    /// Multipliers applied to the positive-pair and negative-pair sums:
    /// `Ĥ = 2(1 − w_n)·Σ_pos + 2w_n·Σ_neg`, so `w_n = 0.5` is the plain
    /// GGN. The `pos` variant keeps the positive sum at weight 1.
    pub fn weights(&self) -> (f64, f64) {
        match self.variant {
            HessianVariant::Pos => (1.0, 0.0),
            HessianVariant::Fix | HessianVariant::Full => (2.0 * (1.0 - self.w_n), 2.0 * self.w_n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianDiag {
    pub values: Vec<f64>,
    /// Entries raised to zero by the clamp.
    pub clamped: usize,
}

/// Diagonal of `Σ_pairs J^{ij}ᵀ H J^{ij}` over the active parameters.
///
/// The clamp at zero is part of the `full` variant, and is applied under
/// the Arccos split for every variant since its output Hessian is
/// indefinite even for positive pairs.
pub fn ggn_hessian_diag(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    active: &ActiveSubset,
    approx: &HessianApprox,
) -> Result<HessianDiag> {
    approx.validate()?;
    let active = active.resolve(spec)?;
    let n_active = active.len();
    let out = point_outputs(spec, params, dataset)?;
    let zs = out.loss_inputs(split);
    let jacs = point_jacobians(spec, params, dataset, batch, split, &active)?;
    let (w_pos, w_neg) = approx.weights();
    let keep_cross = approx.variant != HessianVariant::Fix;

    let mut diag = vec![0.0; n_active];
    match split {
        Split::Euclidean => {
            // Output Hessian is y·[[I, −I], [−I, I]]; per column k the pair adds
            // y(‖a‖² + ‖b‖²) − 2y·a·b (cross term only when kept).
            let col_sq: Vec<Vec<f64>> = jacs.iter().map(column_sq_norms).collect();
            for p in &batch.pairs {
                let w = pair_weight(p.kind, w_pos, w_neg);
                let y = w * p.target;
                if y == 0.0 {
                    continue;
                }
                let (ji, jj) = (&jacs[p.i], &jacs[p.j]);
                for (k, slot) in diag.iter_mut().enumerate() {
                    let mut v = col_sq[p.i][k] + col_sq[p.j][k];
                    if keep_cross {
                        v -= 2.0 * ji.column(k).dot(&jj.column(k));
                    }
                    *slot += y * v;
                }
            }
        }
        Split::Arccos => {
            for p in &batch.pairs {
                let w = pair_weight(p.kind, w_pos, w_neg);
                let y = w * p.target;
                if y == 0.0 {
                    continue;
                }
                let blocks = pair_hessian_blocks(y, &zs[p.i], &zs[p.j], split)?;
                let (ji, jj) = (&jacs[p.i], &jacs[p.j]);
                let hii_ji = &blocks.ii * ji;
                let hjj_jj = &blocks.jj * jj;
                let hij_jj = &blocks.ij * jj;
                for (k, slot) in diag.iter_mut().enumerate() {
                    let a = ji.column(k);
                    let b = jj.column(k);
                    let mut v = a.dot(&hii_ji.column(k)) + b.dot(&hjj_jj.column(k));
                    if keep_cross {
                        v += 2.0 * a.dot(&hij_jj.column(k));
                    }
                    *slot += v;
                }
            }
        }
    }
    for v in &mut diag {
        *v *= batch.scale;
    }

    let clamp = approx.variant == HessianVariant::Full || split == Split::Arccos;
    let mut clamped = 0;
    if clamp {
        for v in &mut diag {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
    }
    Ok(HessianDiag {
        values: diag,
        clamped,
    })
}

fn pair_weight(kind: PairKind, w_pos: f64, w_neg: f64) -> f64 {
    if kind.is_negative() {
        w_neg
    } else {
        w_pos
    }
}

fn column_sq_norms(j: &DMatrix<f64>) -> Vec<f64> {
    j.column_iter().map(|c| c.norm_squared()).collect()
}

/// Dense GGN `Σ_pairs w·J^{ij}ᵀ H J^{ij}` under `approx`, without the
/// diagonal clamp. Quadratic in the parameter count; only used by the
/// verification suite.
pub fn dense_ggn(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    active: &ActiveSubset,
    approx: &HessianApprox,
) -> Result<DMatrix<f64>> {
    approx.validate()?;
    let active = active.resolve(spec)?;
    let out = point_outputs(spec, params, dataset)?;
    let zs = out.loss_inputs(split);
    let jacs = point_jacobians(spec, params, dataset, batch, split, &active)?;
    let (w_pos, w_neg) = approx.weights();
    let n = active.len();
    let mut h = DMatrix::zeros(n, n);
    for p in &batch.pairs {
        let y = pair_weight(p.kind, w_pos, w_neg) * p.target;
        if y == 0.0 {
            continue;
        }
        let mut blocks = pair_hessian_blocks(y, &zs[p.i], &zs[p.j], split)?;
        if approx.variant == HessianVariant::Fix {
            blocks.ij.fill(0.0);
        }
        let (ji, jj) = (&jacs[p.i], &jacs[p.j]);
        let cross = ji.transpose() * &blocks.ij * jj;
        h += ji.transpose() * &blocks.ii * ji + jj.transpose() * &blocks.jj * jj + &cross + cross.transpose();
    }
    Ok(h * batch.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::pairs::{full_targets, LabeledPoint, MarginConfig, Pair, TargetMode};
    use crate::contrastive::loss::embed_all;
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize) -> (NetSpec, ParamVector, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::new(vec![2, 4, 3], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, &mut rng);
        let points = (0..n)
            .map(|k| LabeledPoint {
                id: k.to_string(),
                x: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                label: (k % 2) as u32,
            })
            .collect();
        (spec, params, Dataset::new(points).unwrap())
    }

    #[test]
    fn pos_variant_without_positives_is_zero() {
        let (spec, params, ds) = setup(1, 4);
        let batch = PairBatch {
            pairs: vec![Pair { i: 0, j: 1, kind: PairKind::NegativeInside, target: -0.5 }],
            scale: 1.0,
            counts: Default::default(),
        };
        let h = ggn_hessian_diag(&spec, &params, &ds, &batch, Split::Euclidean, &ActiveSubset::LastLayer, &HessianApprox::new(HessianVariant::Pos)).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diag_matches_dense_assembly() {
        let (spec, params, ds) = setup(2, 6);
        let z = embed_all(&spec, &params, &ds).unwrap();
        let m = MarginConfig::new(1.0, Default::default()).unwrap();
        let batch = full_targets(&z, &ds.labels(), &m, &TargetMode::Balanced).unwrap();
        for split in [Split::Euclidean, Split::Arccos] {
            for variant in [HessianVariant::Pos, HessianVariant::Fix] {
                let approx = HessianApprox::new(variant);
                let dense = dense_ggn(&spec, &params, &ds, &batch, split, &ActiveSubset::LastLayer, &approx).unwrap();
                let diag = ggn_hessian_diag(&spec, &params, &ds, &batch, split, &ActiveSubset::LastLayer, &approx).unwrap();
                for (k, v) in diag.values.iter().enumerate() {
                    let want = if split == Split::Arccos { dense[(k, k)].max(0.0) } else { dense[(k, k)] };
                    assert!((v - want).abs() < 1e-12, "{split:?} {variant:?} {k}: {v} vs {want}");
                }
            }
        }
    }

    #[test]
    fn full_variant_is_nonnegative() {
        for seed in 0..10 {
            let (spec, params, ds) = setup(seed, 8);
            let z = embed_all(&spec, &params, &ds).unwrap();
            let m = MarginConfig::new(1.8, Default::default()).unwrap();
            let batch = full_targets(&z, &ds.labels(), &m, &TargetMode::Balanced).unwrap();
            let h = ggn_hessian_diag(&spec, &params, &ds, &batch, Split::Euclidean, &ActiveSubset::All, &HessianApprox::new(HessianVariant::Full)).unwrap();
            assert!(h.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn w_n_bounds() {
        let bad = HessianApprox { variant: HessianVariant::Full, w_n: 1.5 };
        assert!(bad.validate().is_err());
        assert_eq!(HessianApprox::new(HessianVariant::Full).weights(), (1.0, 1.0));
        assert_eq!(HessianApprox::new(HessianVariant::Pos).weights(), (1.0, 0.0));
    }
}
