//! Self-check suite run by the `verify` command: analytic derivatives
//! against finite differences, GGN structure, PSD guarantees, the
//! loss/likelihood equivalence, minibatch unbiasedness and the vMF
//! estimator.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    dataset_loss, dataset_loss_with_form, dense_ggn, embed_all, full_targets, ggn_hessian_diag,
    loss_gradient, loss_gradient_with_form, minibatch_targets, pair_hessian_output, per_pair_loss, Dataset,
    HessianApprox, HessianVariant, LabeledPoint, LossForm, MarginConfig, MarginConvention, PairKind, TargetMode,
};
use crate::error::Result;
use crate::net::{finite_diff_jacobian, jacobian, Activation, ActiveSubset, NetSpec, ParamVector, Split};
use crate::vmf::{dataset_log_likelihood, kappa_from_resultant, vmf_estimate};

/// Repetition counts for each check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub jacobian_nets: usize,
    pub hessian_pairs: usize,
    pub ggn_batches: usize,
    pub psd_datasets: usize,
    pub equivalence_pairs: usize,
    pub minibatch_draws: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            jacobian_nets: 100,
            hessian_pairs: 100,
            ggn_batches: 50,
            psd_datasets: 200,
            equivalence_pairs: 50,
            minibatch_draws: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} worst={:.3e} tol={:.1e}", self.name, self.worst, self.tolerance)
    }
}

fn outcome(name: &str, worst: f64, tolerance: f64, passed: bool) -> CheckOutcome {
    CheckOutcome { name: name.to_string(), passed, worst, tolerance }
}

fn random_spec(rng: &mut ChaCha8Rng) -> NetSpec {
    let d_in = rng.random_range(1..5);
    let hidden = rng.random_range(2..7);
    let d_out = rng.random_range(2..5);
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let dims = if rng.random_bool(0.3) { vec![d_in, d_out] } else { vec![d_in, hidden, d_out] };
    NetSpec::new(dims, activation).expect("valid random spec")
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = random_vec(rng, d);
        let n = crate::net::norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Dataset with `classes` classes of `per_class` points each.
fn random_dataset(rng: &mut ChaCha8Rng, dim: usize, classes: usize, per_class: usize) -> Dataset {
    let points = (0..classes * per_class)
        .map(|k| LabeledPoint { id: k.to_string(), x: random_vec(rng, dim), label: (k % classes) as u32 })
        .collect();
    Dataset { points }
}

fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

pub fn check_jacobians(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let spec = random_spec(&mut rng);
        let params = ParamVector::init(&spec, &mut rng);
        let x = random_vec(&mut rng, spec.input_dim());
        for split in [Split::Euclidean, Split::Arccos] {
            let exact = jacobian(&spec, &params, &x, split, &ActiveSubset::All)?.matrix;
            let fd = finite_diff_jacobian(&spec, &params, &x, split, &ActiveSubset::All, 1e-6)?;
            worst = worst.max(max_rel_err(&exact, &fd));
        }
    }
    Ok(outcome("jacobian_finite_diff", worst, 1e-5, worst <= 1e-5))
}

/// Central second differences of the per-pair loss in the stacked
/// `(z_i, z_j)` coordinates.
fn fd_pair_hessian(y: f64, zi: &[f64], zj: &[f64], split: Split, h: f64) -> Result<DMatrix<f64>> {
    let d = zi.len();
    let base: Vec<f64> = zi.iter().chain(zj).copied().collect();
    let f = |v: &[f64]| per_pair_loss(y, &v[..d], &v[d..], split);
    let mut out = DMatrix::zeros(2 * d, 2 * d);
    for a in 0..2 * d {
        for b in 0..2 * d {
            let mut acc = 0.0;
            for (sa, sb, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let mut v = base.clone();
                v[a] += sa * h;
                v[b] += sb * h;
                acc += w * f(&v)?;
            }
            out[(a, b)] = acc / (4.0 * h * h);
        }
    }
    Ok(out)
}

pub fn check_output_hessians(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(2..5);
        let zi = random_unit(&mut rng, d);
        let zj = random_unit(&mut rng, d);
        let y = rng.random_range(-2.0..2.0);
        for split in [Split::Euclidean, Split::Arccos] {
            let exact = pair_hessian_output(y, &zi, &zj, split)?;
            let fd = fd_pair_hessian(y, &zi, &zj, split, 1e-4)?;
            worst = worst.max(max_rel_err(&exact, &fd));
        }
    }
    Ok(outcome("output_hessian_finite_diff", worst, 1e-4, worst <= 1e-4))
}

pub fn check_ggn_identity(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let approx = HessianApprox::new(HessianVariant::Full);
    for _ in 0..n {
        let spec = random_spec(&mut rng);
        let params = ParamVector::init(&spec, &mut rng);
        let per_class = rng.random_range(1..4);
        let ds = random_dataset(&mut rng, spec.input_dim(), 2, per_class);
        let margin = MarginConfig::new(rng.random_range(0.2..2.0), MarginConvention::Unsquared)?;
        let z = embed_all(&spec, &params, &ds)?;
        let batch = full_targets(&z, &ds.labels(), &margin, &TargetMode::Balanced)?;
        let jacs: Vec<DMatrix<f64>> = ds
            .points
            .iter()
            .map(|p| jacobian(&spec, &params, &p.x, Split::Euclidean, &ActiveSubset::All).map(|j| j.matrix))
            .collect::<Result<_>>()?;
        let mut oracle = vec![0.0; spec.n_params()];
        for p in &batch.pairs {
            let diff = &jacs[p.i] - &jacs[p.j];
            for (k, o) in oracle.iter_mut().enumerate() {
                *o += p.target * diff.column(k).norm_squared();
            }
        }
        let dense = dense_ggn(&spec, &params, &ds, &batch, Split::Euclidean, &ActiveSubset::All, &approx)?;
        let diag = ggn_hessian_diag(&spec, &params, &ds, &batch, Split::Euclidean, &ActiveSubset::All, &approx)?;
        for (k, o) in oracle.iter().enumerate() {
            worst = worst.max((dense[(k, k)] - o).abs()).max((diag.values[k] - o.max(0.0)).abs());
        }
    }
    Ok(outcome("ggn_identity", worst, 1e-10, worst <= 1e-10))
}

/// Smallest eigenvalue of the dense GGN under `fix` and `pos`, and the
/// smallest `full` diagonal entry, over datasets with equal class sizes.
pub fn check_psd(n: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_eig = [f64::INFINITY; 2];
    let mut min_full = f64::INFINITY;
    for _ in 0..n {
        let spec = random_spec(&mut rng);
        let params = ParamVector::init(&spec, &mut rng);
        let (classes, per_class) = (rng.random_range(2..4), rng.random_range(1..4));
        let ds = random_dataset(&mut rng, spec.input_dim(), classes, per_class);
        let margin = MarginConfig::new(rng.random_range(0.1..2.0), MarginConvention::Unsquared)?;
        let z = embed_all(&spec, &params, &ds)?;
        let batch = full_targets(&z, &ds.labels(), &margin, &TargetMode::Balanced)?;
        for (slot, variant) in [HessianVariant::Fix, HessianVariant::Pos].into_iter().enumerate() {
            let h = dense_ggn(&spec, &params, &ds, &batch, Split::Euclidean, &ActiveSubset::All, &HessianApprox::new(variant))?;
            let eig = SymmetricEigen::new(h).eigenvalues.min();
            min_eig[slot] = min_eig[slot].min(eig);
        }
        let full = ggn_hessian_diag(
            &spec,
            &params,
            &ds,
            &batch,
            Split::Euclidean,
            &ActiveSubset::All,
            &HessianApprox::new(HessianVariant::Full),
        )?;
        min_full = full.values.iter().copied().fold(min_full, f64::min);
    }
    Ok(vec![
        outcome("psd_fix_min_eigenvalue", min_eig[0], -1e-8, min_eig[0] >= -1e-8),
        outcome("psd_pos_min_eigenvalue", min_eig[1], -1e-8, min_eig[1] >= -1e-8),
        outcome("full_diag_nonnegative", min_full, 0.0, min_full >= 0.0),
    ])
}

/// `|Δℒ + Δlog P|` between random parameter pairs with vMF targets and a
/// margin that covers the whole sphere.
pub fn check_equivalence(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let spec = random_spec(&mut rng);
        let ds = random_dataset(&mut rng, spec.input_dim(), 2, 3);
        let kappa = rng.random_range(0.5..5.0);
        let mode = TargetMode::Vmf { kappa };
        let eval = |p: &ParamVector| -> Result<(f64, f64)> {
            let z = embed_all(&spec, p, &ds)?;
            let batch = full_targets(&z, &ds.labels(), &MarginConfig::covering(), &mode)?;
            Ok((
                dataset_loss(&spec, p, &ds, &batch, Split::Euclidean)?,
                dataset_log_likelihood(&spec, p, &ds, kappa)?,
            ))
        };
        let (l1, p1) = eval(&ParamVector::init(&spec, &mut rng))?;
        let (l2, p2) = eval(&ParamVector::init(&spec, &mut rng))?;
        worst = worst.max(((l2 - l1) + (p2 - p1)).abs());
    }
    Ok(outcome("loss_loglik_equivalence", worst, 1e-8, worst <= 1e-8))
}

/// Full-batch exactness, then the mean of stratified minibatch estimates
/// on a 6-point dataset, in standard errors from the full loss.
pub fn check_minibatch(draws: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec::new(vec![2, 4, 3], Activation::Tanh)?;
    let params = ParamVector::init(&spec, &mut rng);
    let ds = random_dataset(&mut rng, 2, 2, 3);
    let labels = ds.labels();
    let margin = MarginConfig::new(1.2, MarginConvention::Unsquared)?;
    let z = embed_all(&spec, &params, &ds)?;
    let full = full_targets(&z, &labels, &margin, &TargetMode::Balanced)?;
    let full_loss = dataset_loss(&spec, &params, &ds, &full, Split::Euclidean)?;

    let n = ds.len();
    let triples: Vec<(usize, usize, PairKind)> = full.pairs.iter().map(|p| (p.i, p.j, p.kind)).collect();
    let all = minibatch_targets(&triples, n * n)?;
    let exact_err = (dataset_loss(&spec, &params, &ds, &all, Split::Euclidean)? - full_loss).abs();

    let (pos, neg): (Vec<_>, Vec<_>) = triples.iter().copied().partition(|t| t.2 == PairKind::Positive);
    let (n_pos, n_neg) = (4, 6);
    let mut samples = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut chosen: Vec<_> = index::sample(&mut rng, pos.len(), n_pos).into_iter().map(|k| pos[k]).collect();
        chosen.extend(index::sample(&mut rng, neg.len(), n_neg).into_iter().map(|k| neg[k]));
        let batch = minibatch_targets(&chosen, n * n)?;
        samples.push(dataset_loss(&spec, &params, &ds, &batch, Split::Euclidean)?);
    }
    let mean = samples.iter().sum::<f64>() / draws as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
    let se = (var / draws as f64).sqrt();
    let z_score = if se > 0.0 { (mean - full_loss).abs() / se } else { (mean - full_loss).abs() };
    Ok(vec![
        outcome("minibatch_full_exact", exact_err, 1e-12, exact_err <= 1e-12),
        outcome("minibatch_unbiased_se", z_score, 3.0, z_score <= 3.0),
    ])
}

/// Loss and gradient agree with and without the stop-gradient split.
pub fn check_fix_neutrality(n: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let spec = random_spec(&mut rng);
        let params = ParamVector::init(&spec, &mut rng);
        let ds = random_dataset(&mut rng, spec.input_dim(), 2, 3);
        for split in [Split::Euclidean, Split::Arccos] {
            let batch = full_targets(&embed_all(&spec, &params, &ds)?, &ds.labels(), &MarginConfig::default(), &TargetMode::Balanced)?;
            let l0 = dataset_loss(&spec, &params, &ds, &batch, split)?;
            let l1 = dataset_loss_with_form(&spec, &params, &ds, &batch, split, LossForm::StopGradient)?;
            let g0 = loss_gradient(&spec, &params, &ds, &batch, split, &ActiveSubset::All)?;
            let g1 = loss_gradient_with_form(&spec, &params, &ds, &batch, split, &ActiveSubset::All, LossForm::StopGradient)?;
            worst = worst.max((l0 - l1).abs());
            for (a, b) in g0.iter().zip(&g1) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(outcome("fix_stop_gradient_neutral", worst, 1e-12, worst <= 1e-12))
}

/// Unit vectors scattered around `mu` with isotropic Gaussian noise `sigma`.
pub fn noisy_cloud(mu: &[f64], sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = mu.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let nv = crate::net::norm(&v);
            v.into_iter().map(|x| x / nv).collect()
        })
        .collect()
}

pub fn check_vmf(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut worst_step = f64::INFINITY;
    for dim in 2..6 {
        let grid: Vec<f64> = (0..100).map(|k| k as f64 / 100.0).collect();
        for w in grid.windows(2) {
            worst_step = worst_step.min(kappa_from_resultant(w[1], dim) - kappa_from_resultant(w[0], dim));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = [0.0, 0.0, 1.0];
    let tight = vmf_estimate(&noisy_cloud(&mu, 0.05, 200, &mut rng))?.kappa;
    let loose = vmf_estimate(&noisy_cloud(&mu, 0.5, 200, &mut rng))?.kappa;
    Ok(vec![
        outcome("kappa_monotone_in_r_bar", worst_step, 0.0, worst_step > 0.0),
        outcome("kappa_tight_over_loose", loose / tight, 1.0, tight > loose),
    ])
}

pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<CheckOutcome>> {
    let s = cfg.seed;
    let mut out = vec![
        check_jacobians(cfg.jacobian_nets, s)?,
        check_output_hessians(cfg.hessian_pairs, s.wrapping_add(1))?,
        check_ggn_identity(cfg.ggn_batches, s.wrapping_add(2))?,
    ];
    out.extend(check_psd(cfg.psd_datasets, s.wrapping_add(3))?);
    out.push(check_equivalence(cfg.equivalence_pairs, s.wrapping_add(4))?);
    out.extend(check_minibatch(cfg.minibatch_draws, s.wrapping_add(5))?);
    out.push(check_fix_neutrality(cfg.ggn_batches, s.wrapping_add(6))?);
    out.extend(check_vmf(s.wrapping_add(7))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = VerifyConfig {
            jacobian_nets: 5,
            hessian_pairs: 5,
            ggn_batches: 5,
            psd_datasets: 10,
            equivalence_pairs: 5,
            minibatch_draws: 500,
            seed: 3,
        };
        for o in run_all(&cfg).unwrap() {
            assert!(o.passed, "{o}");
        }
    }
}
