//! Diagonal Gaussian weight posteriors: deterministic contrastive training,
//! post-hoc Laplace fitting, online training with discounted Hessian
//! updates, and posterior sampling for stochastic embeddings.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    dataset_loss, embed_all, ggn_hessian_diag, loss_gradient, mine_pairs, ContrastiveConfig, Dataset, HessianApprox,
    MiningConfig, PairBatch,
};
use crate::error::{Error, Result};
use crate::net::{self, ActiveSubset, NetSpec, ParamVector};

/// Smallest precision used when sampling or inverting.
pub const EPS_PREC: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub spec: NetSpec,
    /// Full parameter vector; the entries in `active` are the posterior mean.
    pub params: ParamVector,
    pub active: Range<usize>,
    pub precision_diag: Vec<f64>,
    pub prior_sigma: f64,
    /// Hessian diagonal entries that were negative and raised to zero.
    pub clamped: usize,
    /// Precision entries raised to [`EPS_PREC`].
    pub floored: usize,
}

impl GaussianPosterior {
    pub fn mean(&self) -> &[f64] {
        &self.params.as_slice()[self.active.clone()]
    }

    pub fn variance_diag(&self) -> Vec<f64> {
        self.precision_diag.iter().map(|p| 1.0 / p.max(EPS_PREC)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.params.check(&self.spec)?;
        if self.active.end > self.params.len() || self.active.is_empty() {
            return Err(Error::Argument(format!("active range {:?} is invalid", self.active)));
        }
        if self.precision_diag.len() != self.active.len() {
            return Err(Error::Dimension {
                what: "precision diagonal",
                expected: self.active.len(),
                got: self.precision_diag.len(),
            });
        }
        if self.precision_diag.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Argument("precision entries must be positive and finite".into()));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::Argument("prior sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Plain gradient descent settings for deterministic training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    /// `None` trains on every ordered pair each step.
    #[serde(default)]
    pub mining: Option<MiningConfig>,
    #[serde(default = "all_params")]
    pub train_subset: ActiveSubset,
}

fn all_params() -> ActiveSubset {
    ActiveSubset::All
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            steps: 300,
            mining: None,
            train_subset: ActiveSubset::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub lambda: f64,
    /// Memory factor in `(0, 1)`: `H ← (1 − α)H + ∇²ℒ`.
    pub alpha: f64,
    pub n_mc: usize,
    pub steps: usize,
    #[serde(default = "one")]
    pub hessian_every: usize,
    #[serde(default)]
    pub mining: Option<MiningConfig>,
    #[serde(default = "all_params")]
    pub train_subset: ActiveSubset,
}

fn one() -> usize {
    1
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            lambda: 0.5,
            alpha: 0.01,
            n_mc: 5,
            steps: 300,
            hessian_every: 1,
            mining: None,
            train_subset: ActiveSubset::All,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Argument("lambda must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_mc == 0 {
            return Err(Error::Argument("n_mc must be at least 1".into()));
        }
        if self.hessian_every == 0 {
            return Err(Error::Argument("hessian_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss and gradient norm recorded before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

fn make_batch(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    contrastive: &ContrastiveConfig,
    mining: Option<&MiningConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    match mining {
        None => contrastive.full_batch(spec, params, dataset),
        Some(m) => {
            let z = embed_all(spec, params, dataset)?;
            mine_pairs(&z, &dataset.labels(), m, &contrastive.margin, &contrastive.target_mode, rng)
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    net::norm(v)
}

pub fn map_train(
    dataset: &Dataset,
    spec: &NetSpec,
    init: &ParamVector,
    config: &TrainConfig,
    contrastive: &ContrastiveConfig,
    seed: u64,
) -> Result<ParamVector> {
    Ok(map_train_traced(dataset, spec, init, config, contrastive, seed)?.0)
}

/// Deterministic contrastive training by gradient descent.
pub fn map_train_traced(
    dataset: &Dataset,
    spec: &NetSpec,
    init: &ParamVector,
    config: &TrainConfig,
    contrastive: &ContrastiveConfig,
    seed: u64,
) -> Result<(ParamVector, TrainTrace)> {
    dataset.validate()?;
    init.check(spec)?;
    contrastive.validate()?;
    let range = config.train_subset.resolve(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init.clone();
    let mut trace = TrainTrace::default();
    for step in 0..config.steps {
        let batch = make_batch(spec, &params, dataset, contrastive, config.mining.as_ref(), &mut rng)?;
        let loss = dataset_loss(spec, &params, dataset, &batch, contrastive.split)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, what: "loss" });
        }
        let grad = loss_gradient(spec, &params, dataset, &batch, contrastive.split, &config.train_subset)?;
        let gn = l2(&grad);
        if !gn.is_finite() {
            return Err(Error::Divergence { step, what: "gradient" });
        }
        trace.losses.push(loss);
        trace.grad_norms.push(gn);
        for (p, g) in params.0[range.clone()].iter_mut().zip(&grad) {
            *p -= config.lambda * g;
        }
    }
    Ok((params, trace))
}

/// Hessian diagonal with any remaining negative entries raised to zero.
fn nonnegative_hessian(
    spec: &NetSpec,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    contrastive: &ContrastiveConfig,
    active: &ActiveSubset,
    approx: &HessianApprox,
) -> Result<(Vec<f64>, usize)> {
    let h = ggn_hessian_diag(spec, params, dataset, batch, contrastive.split, active, approx)?;
    let mut clamped = h.clamped;
    let values = h
        .values
        .into_iter()
        .map(|v| {
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok((values, clamped))
}

/// Post-hoc Laplace: mean at `theta_star`, precision = GGN diagonal over
/// every ordered pair + `σ_prior⁻²`.
pub fn posthoc_fit(
    theta_star: &ParamVector,
    dataset: &Dataset,
    spec: &NetSpec,
    contrastive: &ContrastiveConfig,
    approx: &HessianApprox,
    prior_sigma: f64,
    active: &ActiveSubset,
) -> Result<GaussianPosterior> {
    let batch = contrastive.full_batch(spec, theta_star, dataset)?;
    posthoc_fit_on_batch(theta_star, dataset, &batch, spec, contrastive, approx, prior_sigma, active)
}

/// Post-hoc Laplace over a given (possibly mined) pair batch.
#[allow(clippy::too_many_arguments)]
pub fn posthoc_fit_on_batch(
    theta_star: &ParamVector,
    dataset: &Dataset,
    batch: &PairBatch,
    spec: &NetSpec,
    contrastive: &ContrastiveConfig,
    approx: &HessianApprox,
    prior_sigma: f64,
    active: &ActiveSubset,
) -> Result<GaussianPosterior> {
    if !(prior_sigma > 0.0 && prior_sigma.is_finite()) {
        return Err(Error::Argument(format!("prior sigma must be positive, got {prior_sigma}")));
    }
    theta_star.check(spec)?;
    let range = active.resolve(spec)?;
    let (h, clamped) = nonnegative_hessian(spec, theta_star, dataset, batch, contrastive, active, approx)?;
    let prior_prec = 1.0 / (prior_sigma * prior_sigma);
    Ok(GaussianPosterior {
        spec: spec.clone(),
        params: theta_star.clone(),
        active: range,
        precision_diag: h.into_iter().map(|v| v + prior_prec).collect(),
        prior_sigma,
        clamped,
        floored: 0,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub posterior: GaussianPosterior,
    pub trace: TrainTrace,
}

/// Online Laplace training.
///
/// Each step takes a gradient step on the loss averaged over `n_mc`
/// parameter samples from the current posterior, then discounts the
/// precision: `H ← (1 − α)H + ∇²ℒ(θ_t)`, with the Hessian evaluated at the
/// mean. The precision starts at the prior `σ_prior⁻²` and never drops
/// below [`EPS_PREC`].
#[allow(clippy::too_many_arguments)]
pub fn online_train(
    dataset: &Dataset,
    spec: &NetSpec,
    init: &ParamVector,
    config: &OnlineConfig,
    contrastive: &ContrastiveConfig,
    approx: &HessianApprox,
    prior_sigma: f64,
    active: &ActiveSubset,
    seed: u64,
) -> Result<OnlineResult> {
    dataset.validate()?;
    init.check(spec)?;
    config.validate()?;
    contrastive.validate()?;
    approx.validate()?;
    if !(prior_sigma > 0.0 && prior_sigma.is_finite()) {
        return Err(Error::Argument(format!("prior sigma must be positive, got {prior_sigma}")));
    }
    let post_range = active.resolve(spec)?;
    let train_range = config.train_subset.resolve(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut params = init.clone();
    let mut precision = vec![1.0 / (prior_sigma * prior_sigma); post_range.len()];
    let mut hessian = vec![0.0; post_range.len()];
    let mut clamped = 0;
    let mut floored = 0;
    let mut trace = TrainTrace::default();

    for step in 0..config.steps {
        let batch = make_batch(spec, &params, dataset, contrastive, config.mining.as_ref(), &mut rng)?;
        let loss = dataset_loss(spec, &params, dataset, &batch, contrastive.split)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, what: "loss" });
        }

        let mut grad = vec![0.0; train_range.len()];
        let mut sample = params.clone();
        for _ in 0..config.n_mc {
            for (k, idx) in post_range.clone().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                sample.0[idx] = params.0[idx] + eps / precision[k].max(EPS_PREC).sqrt();
            }
            let g = loss_gradient(spec, &sample, dataset, &batch, contrastive.split, &config.train_subset)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi / config.n_mc as f64;
            }
        }
        let gn = l2(&grad);
        if !gn.is_finite() {
            return Err(Error::Divergence { step, what: "gradient" });
        }
        trace.losses.push(loss);
        trace.grad_norms.push(gn);

        if step % config.hessian_every == 0 {
            let (h, c) = nonnegative_hessian(spec, &params, dataset, &batch, contrastive, active, approx)?;
            hessian = h;
            clamped += c;
        }
        for (p, h) in precision.iter_mut().zip(&hessian) {
            *p = (1.0 - config.alpha) * *p + h;
            if !p.is_finite() {
                return Err(Error::Divergence { step, what: "precision" });
            }
            if *p < EPS_PREC {
                *p = EPS_PREC;
                floored += 1;
            }
        }
        for (p, g) in params.0[train_range.clone()].iter_mut().zip(&grad) {
            *p -= config.lambda * g;
        }
    }

    Ok(OnlineResult {
        posterior: GaussianPosterior {
            spec: spec.clone(),
            params,
            active: post_range,
            precision_diag: precision,
            prior_sigma,
            clamped,
            floored,
        },
        trace,
    })
}

/// `θ_k = mean + precision^{-1/2} ⊙ ε_k`, deterministic under `seed`.
pub fn sample_params(posterior: &GaussianPosterior, n: usize, seed: u64) -> Result<Vec<ParamVector>> {
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std: Vec<f64> = posterior
        .precision_diag
        .iter()
        .map(|p| 1.0 / p.max(EPS_PREC).sqrt())
        .collect();
    Ok((0..n)
        .map(|_| {
            let mut theta = posterior.params.clone();
            for (k, idx) in posterior.active.clone().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                theta.0[idx] += std[k] * eps;
            }
            theta
        })
        .collect())
}

/// Unit-sphere embeddings of `x` through `n` sampled networks.
pub fn embed_stochastic(posterior: &GaussianPosterior, x: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_params(posterior, n, seed)?
        .iter()
        .map(|theta| net::embed(&posterior.spec, theta, x))
        .collect()
}

/// Stochastic embeddings for many inputs through one shared set of sampled
/// networks; `out[item][sample]`.
pub fn embed_stochastic_batch(
    posterior: &GaussianPosterior,
    xs: &[&[f64]],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let thetas = sample_params(posterior, n, seed)?;
    xs.iter()
        .map(|x| thetas.iter().map(|t| net::embed(&posterior.spec, t, x)).collect())
        .collect()
}
