//! Per-pair contrastive loss `ℒ_y`, its output-space derivatives for both
//! splits, and dataset-level loss and gradient.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::contrastive::pairs::{Dataset, PairBatch};
use crate::error::{Error, Result};
use crate::net::{self, normalize_jacobian, ActiveSubset, NetSpec, ParamVector, Split, EPS_NORM};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_and_norm(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = net::norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok((v.iter().map(|a| a / n).collect(), n))
}

/// Euclidean: `½·y·‖z_i − z_j‖²`. Arccos: `y·(1 − ⟨ẑ_i, ẑ_j⟩)` on the
/// normalized inputs.
pub fn per_pair_loss(y: f64, zi: &[f64], zj: &[f64], split: Split) -> Result<f64> {
    match split {
        Split::Euclidean => {
            let sq: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(0.5 * y * sq)
        }
        Split::Arccos => {
            let (a, _) = unit_and_norm(zi)?;
            let (b, _) = unit_and_norm(zj)?;
            Ok(y * (1.0 - dot(&a, &b)))
        }
    }
}

/// `(∂ℒ/∂z_i, ∂ℒ/∂z_j)`.
pub fn pair_gradient_output(y: f64, zi: &[f64], zj: &[f64], split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
    match split {
        Split::Euclidean => {
            let gi: Vec<f64> = zi.iter().zip(zj).map(|(a, b)| y * (a - b)).collect();
            let gj = gi.iter().map(|g| -g).collect();
            Ok((gi, gj))
        }
        Split::Arccos => {
            let (a, ri) = unit_and_norm(zi)?;
            let (b, rj) = unit_and_norm(zj)?;
            let c = dot(&a, &b);
            // ∂/∂z_i = −y (I − aaᵀ) b / ‖z_i‖
            let gi = a.iter().zip(&b).map(|(ak, bk)| -y * (bk - c * ak) / ri).collect();
            let gj = a.iter().zip(&b).map(|(ak, bk)| -y * (ak - c * bk) / rj).collect();
            Ok((gi, gj))
        }
    }
}

/// The three distinct blocks of the output-space Hessian:
/// `∇²_{z_i}`, `∇_{z_j}∇_{z_i}` (rows index `z_i`), and `∇²_{z_j}`.
#[derive(Debug, Clone)]
pub struct PairHessianBlocks {
    pub ii: DMatrix<f64>,
    pub ij: DMatrix<f64>,
    pub jj: DMatrix<f64>,
}

impl PairHessianBlocks {
    pub fn assemble(&self) -> DMatrix<f64> {
        let d = self.ii.nrows();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        h.view_mut((0, 0), (d, d)).copy_from(&self.ii);
        h.view_mut((0, d), (d, d)).copy_from(&self.ij);
        h.view_mut((d, 0), (d, d)).copy_from(&self.ij.transpose());
        h.view_mut((d, d), (d, d)).copy_from(&self.jj);
        h
    }
}

pub fn pair_hessian_blocks(y: f64, zi: &[f64], zj: &[f64], split: Split) -> Result<PairHessianBlocks> {
    let d = zi.len();
    match split {
        Split::Euclidean => {
            let id = DMatrix::<f64>::identity(d, d);
            Ok(PairHessianBlocks {
                ii: &id * y,
                ij: &id * (-y),
                jj: id * y,
            })
        }
        Split::Arccos => {
            let (a, ri) = unit_and_norm(zi)?;
            let (b, rj) = unit_and_norm(zj)?;
            let c = dot(&a, &b);
            let av = nalgebra::DVector::from_vec(a);
            let bv = nalgebra::DVector::from_vec(b);
            let id = DMatrix::<f64>::identity(d, d);
            let ab = &av * bv.transpose();
            let ba = &bv * av.transpose();
            let aa = &av * av.transpose();
            let bb = &bv * bv.transpose();
            let ii = (&id * c + &ab + &ba - &aa * (3.0 * c)) * (y / (ri * ri));
            let jj = (&id * c + &ab + &ba - &bb * (3.0 * c)) * (y / (rj * rj));
            // −y (I − aaᵀ)(I − bbᵀ) / (‖z_i‖‖z_j‖)
            let ij = (-&id + &aa + &bb - &ab * c) * (y / (ri * rj));
            Ok(PairHessianBlocks { ii, ij, jj })
        }
    }
}

/// Full `2d × 2d` output-space Hessian of `ℒ_y` with respect to `(z_i, z_j)`.
pub fn pair_hessian_output(y: f64, zi: &[f64], zj: &[f64], split: Split) -> Result<DMatrix<f64>> {
    Ok(pair_hessian_blocks(y, zi, zj, split)?.assemble())
}

/// How the pair loss is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// Both points move together.
    #[default]
    Joint,
    /// One point at a time, the other held fixed (stop-gradient). Each
    /// one-sided term carries half the pair value and the partial
    /// derivative of its moving point.
    StopGradient,
}

/// Per-point network outputs for one parameter vector.
pub(crate) struct PointOutputs {
    /// Pre-normalization outputs `u`.
    pub u: Vec<Vec<f64>>,
    /// Normalized outputs `z`.
    pub z: Vec<Vec<f64>>,
}

pub(crate) fn point_outputs(spec: &NetSpec, params: &ParamVector, dataset: &Dataset) -> Result<PointOutputs> {
    let mut u = Vec::with_capacity(dataset.len());
    let mut z = Vec::with_capacity(dataset.len());
    for p in &dataset.points {
        let out = net::forward(spec, params, &p.x)?;
        z.push(net::normalize(&out)?);
        u.push(out);
    }
    Ok(PointOutputs { u, z })
}

/// Unit-sphere embeddings of every point.
pub fn embed_all(spec: &NetSpec, params: &ParamVector, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    Ok(point_outputs(spec, params, dataset)?.z)
}

impl PointOutputs {
    /// The vectors the per-pair loss sees under `split`.
    pub fn loss_inputs(&self, split: Split) -> &[Vec<f64>] {
        match split {
            Split::Euclidean => &self.z,
            Split::Arccos => &self.u,
        }
    }
}

/// Per-point Jacobians of the loss inputs under `split`, for the points
/// that appear in a pair with a nonzero target. Other points get an empty
/// matrix.
pub(crate) fn point_jacobians(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    active: &Range<usize>,
) -> Result<Vec<DMatrix<f64>>> {
    let mut used = vec![false; dataset.len()];
    for p in batch.pairs.iter().filter(|p| p.target != 0.0) {
        used[p.i] = true;
        used[p.j] = true;
    }
    dataset
        .points
        .iter()
        .zip(used)
        .map(|(p, used)| {
            if !used {
                return Ok(DMatrix::zeros(0, 0));
            }
            let (u, du) = net::forward_with_jacobian(spec, params, &p.x, active)?;
            Ok(match split {
                Split::Arccos => du,
                Split::Euclidean => normalize_jacobian(&u)? * du,
            })
        })
        .collect()
}

fn check_batch(batch: &PairBatch, n: usize) -> Result<()> {
    if let Some(p) = batch.pairs.iter().find(|p| p.i >= n || p.j >= n) {
        return Err(Error::Argument(format!(
            "pair ({}, {}) indexes outside a dataset of {n} points",
            p.i, p.j
        )));
    }
    Ok(())
}

pub fn dataset_loss(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
) -> Result<f64> {
    dataset_loss_with_form(spec, params, dataset, batch, split, LossForm::Joint)
}

/// `scale · Σ_B ℒ_y(z_i, z_j)`.
pub fn dataset_loss_with_form(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    form: LossForm,
) -> Result<f64> {
    check_batch(batch, dataset.len())?;
    let out = point_outputs(spec, params, dataset)?;
    let zs = out.loss_inputs(split);
    let mut total = 0.0;
    for p in &batch.pairs {
        if p.target == 0.0 {
            continue;
        }
        total += match form {
            LossForm::Joint => per_pair_loss(p.target, &zs[p.i], &zs[p.j], split)?,
            LossForm::StopGradient => {
                // ½ℒ(sg[z_i], z_j) + ½ℒ(z_i, sg[z_j])
                0.5 * per_pair_loss(p.target, &zs[p.i], &zs[p.j], split)?
                    + 0.5 * per_pair_loss(p.target, &zs[p.i], &zs[p.j], split)?
            }
        };
    }
    Ok(batch.scale * total)
}

pub fn loss_gradient(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    active: &ActiveSubset,
) -> Result<Vec<f64>> {
    loss_gradient_with_form(spec, params, dataset, batch, split, active, LossForm::Joint)
}

/// Gradient of [`dataset_loss`] with respect to the active parameters.
/// Pair kinds and targets are constants of the batch.
pub fn loss_gradient_with_form(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    split: Split,
    active: &ActiveSubset,
    form: LossForm,
) -> Result<Vec<f64>> {
    check_batch(batch, dataset.len())?;
    let active = active.resolve(spec)?;
    let out = point_outputs(spec, params, dataset)?;
    let zs = out.loss_inputs(split);
    let jacs = point_jacobians(spec, params, dataset, batch, split, &active)?;
    let n_active = active.len();

    match form {
        LossForm::Joint => {
            let d = spec.embedding_dim();
            let mut g_out = vec![vec![0.0; d]; dataset.len()];
            for p in &batch.pairs {
                if p.target == 0.0 {
                    continue;
                }
                let (gi, gj) = pair_gradient_output(p.target, &zs[p.i], &zs[p.j], split)?;
                for k in 0..d {
                    g_out[p.i][k] += gi[k];
                    g_out[p.j][k] += gj[k];
                }
            }
            let mut grad = vec![0.0; n_active];
            for (jac, g) in jacs.iter().zip(&g_out).filter(|(j, _)| j.ncols() > 0) {
                accumulate_vjp(&mut grad, jac, g, batch.scale);
            }
            Ok(grad)
        }
        LossForm::StopGradient => {
            let mut grad = vec![0.0; n_active];
            for p in &batch.pairs {
                if p.target == 0.0 {
                    continue;
                }
                // z_i moves, z_j fixed
                let gi = one_sided_gradient(p.target, &zs[p.i], &zs[p.j], split)?;
                accumulate_vjp(&mut grad, &jacs[p.i], &gi, batch.scale);
                // z_j moves, z_i fixed
                let gj = one_sided_gradient(p.target, &zs[p.j], &zs[p.i], split)?;
                accumulate_vjp(&mut grad, &jacs[p.j], &gj, batch.scale);
            }
            Ok(grad)
        }
    }
}

/// Gradient of `w ↦ ℒ_y(w, fixed)` at `w = moving`.
fn one_sided_gradient(y: f64, moving: &[f64], fixed: &[f64], split: Split) -> Result<Vec<f64>> {
    match split {
        Split::Euclidean => Ok(moving.iter().zip(fixed).map(|(m, f)| y * (m - f)).collect()),
        Split::Arccos => {
            let (a, r) = unit_and_norm(moving)?;
            let (b, _) = unit_and_norm(fixed)?;
            let c = dot(&a, &b);
            Ok(a.iter().zip(&b).map(|(ak, bk)| -y * (bk - c * ak) / r).collect())
        }
    }
}

/// `grad += scale · Jᵀ g`
fn accumulate_vjp(grad: &mut [f64], jac: &DMatrix<f64>, g: &[f64], scale: f64) {
    for (col, slot) in grad.iter_mut().enumerate() {
        let mut s = 0.0;
        for (r, gr) in g.iter().enumerate() {
            s += jac[(r, col)] * gr;
        }
        *slot += scale * s;
    }
}
