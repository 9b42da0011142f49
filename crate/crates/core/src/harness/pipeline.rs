//! End-to-end steps shared by the CLI and the integration tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{embed_all, mine_pairs, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision_at_k, ece_retrieval, map_at_k, ood_auroc_auprc, recall_at_k, sparsification_ausc,
    uncertainty_from_kappa, Queries, RetrievalIndex, UncertaintyScored,
};
use crate::harness::config::{streams, RunConfig};
use crate::harness::data::{gen_blobs, BlobSets};
use crate::harness::report::{ItemUncertainty, MetricsReport};
use crate::laplace::{embed_stochastic_batch, map_train, online_train, posthoc_fit, posthoc_fit_on_batch, GaussianPosterior, OnlineResult};
use crate::net::{NetSpec, ParamVector};
use crate::vmf::{vmf_estimate, K_MAX};

pub fn generate_data(cfg: &RunConfig) -> Result<BlobSets> {
    gen_blobs(&cfg.data, cfg.derived_seed(streams::DATA))
}

pub fn init_params(cfg: &RunConfig) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed(streams::INIT));
    ParamVector::init(&cfg.net, &mut rng)
}

fn check_input(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    if ds.dim() != cfg.net.input_dim() {
        return Err(Error::Dimension {
            what: "dataset features",
            expected: cfg.net.input_dim(),
            got: ds.dim(),
        });
    }
    Ok(())
}

pub fn train_map(cfg: &RunConfig, train: &Dataset) -> Result<ParamVector> {
    check_input(cfg, train)?;
    map_train(train, &cfg.net, &init_params(cfg), &cfg.train, &cfg.contrastive, cfg.derived_seed(streams::MAP))
}

pub fn fit_posthoc(cfg: &RunConfig, theta: &ParamVector, train: &Dataset) -> Result<GaussianPosterior> {
    check_input(cfg, train)?;
    match &cfg.posthoc_mining {
        None => posthoc_fit(theta, train, &cfg.net, &cfg.contrastive, &cfg.hessian, cfg.prior_sigma, &cfg.posterior_subset),
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed(streams::POSTHOC));
            let z = embed_all(&cfg.net, theta, train)?;
            let batch = mine_pairs(&z, &train.labels(), m, &cfg.contrastive.margin, &cfg.contrastive.target_mode, &mut rng)?;
            posthoc_fit_on_batch(theta, train, &batch, &cfg.net, &cfg.contrastive, &cfg.hessian, cfg.prior_sigma, &cfg.posterior_subset)
        }
    }
}

pub fn train_online(cfg: &RunConfig, train: &Dataset) -> Result<OnlineResult> {
    check_input(cfg, train)?;
    online_train(
        train,
        &cfg.net,
        &init_params(cfg),
        &cfg.online,
        &cfg.contrastive,
        &cfg.hessian,
        cfg.prior_sigma,
        &cfg.posterior_subset,
        cfg.derived_seed(streams::ONLINE),
    )
}

/// Stochastic embeddings of one item with its vMF summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbedding {
    pub id: String,
    pub label: u32,
    pub mean_embedding: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub kappa: f64,
    pub r_bar: f64,
}

pub fn stochastic_embeddings(cfg: &RunConfig, posterior: &GaussianPosterior, ds: &Dataset) -> Result<Vec<ItemEmbedding>> {
    check_input(cfg, ds)?;
    let xs: Vec<&[f64]> = ds.points.iter().map(|p| p.x.as_slice()).collect();
    let samples = embed_stochastic_batch(posterior, &xs, cfg.eval.n_samples, cfg.derived_seed(streams::SAMPLES))?;
    let means = embed_all(&posterior.spec, &posterior.params, ds)?;
    ds.points
        .iter()
        .zip(samples)
        .zip(means)
        .map(|((p, s), m)| {
            let est = vmf_estimate(&s)?;
            Ok(ItemEmbedding {
                id: p.id.clone(),
                label: p.label,
                mean_embedding: m,
                samples: s,
                kappa: est.kappa,
                r_bar: est.r_bar,
            })
        })
        .collect()
}

fn item_uncertainties(items: &[ItemEmbedding]) -> Vec<ItemUncertainty> {
    items
        .iter()
        .map(|e| ItemUncertainty {
            id: e.id.clone(),
            label: e.label,
            kappa: e.kappa,
            r_bar: e.r_bar,
            uncertainty: uncertainty_from_kappa(e.kappa),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub items: Vec<ItemUncertainty>,
}

fn retrieval_metrics(
    cfg: &RunConfig,
    spec: &NetSpec,
    params: &ParamVector,
    index_ds: &Dataset,
    query_ds: &Dataset,
    report: &mut MetricsReport,
) -> Result<(RetrievalIndex, Vec<Vec<f64>>, Vec<u32>)> {
    let index = RetrievalIndex::new(embed_all(spec, params, index_ds)?, index_ds.labels())?;
    let q_emb = embed_all(spec, params, query_ds)?;
    let q_labels = query_ds.labels();
    let queries = Queries { embeddings: &q_emb, labels: &q_labels, self_in_index: false };
    for &k in &cfg.eval.ks {
        let k_eff = k.min(index.len());
        report.recall_at_k.insert(k, recall_at_k(&queries, &index, k_eff)?);
        report.map_at_k.insert(k, map_at_k(&queries, &index, k_eff)?);
    }
    report.counts.n_index = index.len();
    report.counts.n_queries = q_emb.len();
    Ok((index, q_emb, q_labels))
}

/// Retrieval metrics of a deterministic network: queries against the index
/// set, both embedded at `params`.
pub fn evaluate_map(cfg: &RunConfig, config_hash: &str, params: &ParamVector, index_ds: &Dataset, query_ds: &Dataset) -> Result<Evaluation> {
    check_input(cfg, index_ds)?;
    check_input(cfg, query_ds)?;
    let mut report = MetricsReport::new(config_hash.to_string(), cfg.seed, cfg.eval.ece_weighting);
    retrieval_metrics(cfg, &cfg.net, params, index_ds, query_ds, &mut report)?;
    Ok(Evaluation { report, items: Vec::new() })
}

/// Retrieval, sparsification and calibration of a posterior. Retrieval uses
/// the posterior mean; uncertainty is `1/κ̄` from sampled query embeddings,
/// and the sparsification score is each query's AP@1.
pub fn evaluate_posterior(
    cfg: &RunConfig,
    config_hash: &str,
    posterior: &GaussianPosterior,
    index_ds: &Dataset,
    query_ds: &Dataset,
) -> Result<Evaluation> {
    check_input(cfg, index_ds)?;
    check_input(cfg, query_ds)?;
    let mut report = MetricsReport::new(config_hash.to_string(), cfg.seed, cfg.eval.ece_weighting);
    let (index, q_emb, q_labels) =
        retrieval_metrics(cfg, &posterior.spec, &posterior.params, index_ds, query_ds, &mut report)?;

    let items = stochastic_embeddings(cfg, posterior, query_ds)?;
    let uncertainty: Vec<f64> = items.iter().map(|e| uncertainty_from_kappa(e.kappa)).collect();
    let queries = Queries { embeddings: &q_emb, labels: &q_labels, self_in_index: false };
    let correctness = average_precision_at_k(&queries, &index, 1)?;
    let grid = cfg.eval.sparsification_grid.unwrap_or(correctness.len());
    let sp = sparsification_ausc(&uncertainty, &correctness, grid)?;
    let mut shuffled = uncertainty.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.derived_seed(streams::SAMPLES) ^ 0x5EED));
    report.ausc_shuffled = Some(sparsification_ausc(&shuffled, &correctness, grid)?.ausc);
    report.ausc = Some(sp.ausc);
    report.sparsification_curve = Some(sp.curve);

    let latents: Vec<Vec<Vec<f64>>> = items.iter().map(|e| e.samples.clone()).collect();
    let ece = ece_retrieval(&latents, &q_labels, &index, cfg.eval.ece_bins, cfg.eval.ece_weighting)?;
    report.ece = Some(ece.ece);
    report.calibration = Some(ece.bins);

    report.counts.n_samples = cfg.eval.n_samples;
    report.counts.hessian_clamped = posterior.clamped;
    report.counts.precision_floored = posterior.floored;
    report.counts.kappa_clamped = items.iter().filter(|e| e.kappa >= K_MAX).count();
    Ok(Evaluation { report, items: item_uncertainties(&items) })
}

/// OoD detection with `1/κ̄` as the score; OoD items are the positives.
pub fn ood_evaluate(
    cfg: &RunConfig,
    config_hash: &str,
    posterior: &GaussianPosterior,
    id_ds: &Dataset,
    ood_ds: &Dataset,
) -> Result<Evaluation> {
    let id_items = stochastic_embeddings(cfg, posterior, id_ds)?;
    let ood_items = stochastic_embeddings(cfg, posterior, ood_ds)?;
    let scored: Vec<UncertaintyScored> = id_items
        .iter()
        .map(|e| (e, false))
        .chain(ood_items.iter().map(|e| (e, true)))
        .map(|(e, is_ood)| UncertaintyScored {
            id: e.id.clone(),
            score: uncertainty_from_kappa(e.kappa),
            is_ood: Some(is_ood),
        })
        .collect();
    let (auroc, auprc) = ood_auroc_auprc(&scored)?;
    let mut report = MetricsReport::new(config_hash.to_string(), cfg.seed, cfg.eval.ece_weighting);
    report.auroc = Some(auroc);
    report.auprc = Some(auprc);
    report.counts.n_queries = id_items.len();
    report.counts.n_ood = ood_items.len();
    report.counts.n_samples = cfg.eval.n_samples;
    report.counts.hessian_clamped = posterior.clamped;
    report.counts.precision_floored = posterior.floored;
    report.counts.kappa_clamped = id_items.iter().chain(&ood_items).filter(|e| e.kappa >= K_MAX).count();
    let mut items = item_uncertainties(&id_items);
    items.extend(item_uncertainties(&ood_items));
    Ok(Evaluation { report, items })
}
