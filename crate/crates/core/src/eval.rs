//! Retrieval and uncertainty metrics: exhaustive k-NN, recall@k, mAP@k,
//! sparsification curves, sampling-based retrieval ECE, and OoD
//! AUROC/AUPRC.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl RetrievalIndex {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::Dimension {
                what: "index labels",
                expected: embeddings.len(),
                got: labels.len(),
            });
        }
        if embeddings.is_empty() {
            return Err(Error::Argument("retrieval index is empty".into()));
        }
        Ok(RetrievalIndex { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Query embeddings with labels. When `self_in_index` is set, query `q` is
/// index entry `q` and is excluded from its own neighbor list.
#[derive(Debug, Clone, Copy)]
pub struct Queries<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub labels: &'a [u32],
    pub self_in_index: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest index entries by ascending Euclidean
/// distance, ties broken by index order.
pub fn knn(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    knn_excluding(index, query, k, None)
}

fn knn_excluding(index: &RetrievalIndex, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let available = index.len() - usize::from(exclude.is_some());
    if k == 0 || k > available {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={available}")));
    }
    let mut scored: Vec<(f64, usize)> = index
        .embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, e)| (sq_dist(query, e), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn neighbor_lists(queries: &Queries, index: &RetrievalIndex, k: usize) -> Result<Vec<Vec<usize>>> {
    if queries.embeddings.len() != queries.labels.len() {
        return Err(Error::Dimension {
            what: "query labels",
            expected: queries.embeddings.len(),
            got: queries.labels.len(),
        });
    }
    queries
        .embeddings
        .iter()
        .enumerate()
        .map(|(q, e)| knn_excluding(index, e, k, queries.self_in_index.then_some(q)))
        .collect()
}

/// Fraction of queries with at least one same-label item in the top `k`.
pub fn recall_at_k(queries: &Queries, index: &RetrievalIndex, k: usize) -> Result<f64> {
    let lists = neighbor_lists(queries, index, k)?;
    if lists.is_empty() {
        return Ok(0.0);
    }
    let hits = lists
        .iter()
        .zip(queries.labels)
        .filter(|(nn, l)| nn.iter().any(|&i| index.labels[i] == **l))
        .count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Per-query `AP@k = (1/min(R, k)) Σ_{r≤k} precision@r · rel(r)`, where `R`
/// counts the relevant index entries; 0 when `R = 0`.
pub fn average_precision_at_k(queries: &Queries, index: &RetrievalIndex, k: usize) -> Result<Vec<f64>> {
    let lists = neighbor_lists(queries, index, k)?;
    Ok(lists
        .iter()
        .enumerate()
        .map(|(q, nn)| {
            let label = queries.labels[q];
            let relevant = index
                .labels
                .iter()
                .enumerate()
                .filter(|&(i, l)| *l == label && !(queries.self_in_index && i == q))
                .count();
            if relevant == 0 {
                return 0.0;
            }
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (r, &i) in nn.iter().enumerate() {
                if index.labels[i] == label {
                    hits += 1;
                    sum += hits as f64 / (r + 1) as f64;
                }
            }
            sum / relevant.min(k) as f64
        })
        .collect())
}

pub fn map_at_k(queries: &Queries, index: &RetrievalIndex, k: usize) -> Result<f64> {
    let ap = average_precision_at_k(queries, index, k)?;
    Ok(if ap.is_empty() {
        0.0
    } else {
        ap.iter().sum::<f64>() / ap.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sparsification {
    /// Removed fraction for each curve point.
    pub fractions: Vec<f64>,
    pub curve: Vec<f64>,
    pub ausc: f64,
}

/// Sparsification curve: at fraction `t = k/grid` the `⌊tN⌋` most uncertain
/// queries are removed and the mean correctness of the rest is recorded.
/// AUSC is the trapezoidal area divided by the span of `t`.
pub fn sparsification_ausc(uncertainty: &[f64], correctness: &[f64], grid: usize) -> Result<Sparsification> {
    let n = uncertainty.len();
    if n == 0 || n != correctness.len() {
        return Err(Error::Argument(format!(
            "need matching non-empty inputs, got {} uncertainties and {} scores",
            n,
            correctness.len()
        )));
    }
    if grid == 0 {
        return Err(Error::Argument("sparsification grid must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Most uncertain first; ties by index.
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));

    // suffix[r] = sum of correctness over order[r..]
    let mut suffix = vec![0.0; n + 1];
    for r in (0..n).rev() {
        suffix[r] = suffix[r + 1] + correctness[order[r]];
    }
    let mut fractions = Vec::with_capacity(grid);
    let mut curve = Vec::with_capacity(grid);
    for g in 0..grid {
        let t = g as f64 / grid as f64;
        let removed = ((t * n as f64).floor() as usize).min(n - 1);
        fractions.push(t);
        curve.push(suffix[removed] / (n - removed) as f64);
    }
    let ausc = if grid == 1 {
        curve[0]
    } else {
        let area: f64 = fractions
            .windows(2)
            .zip(curve.windows(2))
            .map(|(t, c)| (t[1] - t[0]) * (c[0] + c[1]) / 2.0)
            .sum();
        area / (fractions[grid - 1] - fractions[0])
    };
    Ok(Sparsification { fractions, curve, ausc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EceWeighting {
    /// `Σ_i (|B_i|/N)·|acc − conf|`
    #[default]
    Weighted,
    /// `Σ_i (1/|B_i|)·|acc − conf|`
    InverseCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceResult {
    pub ece: f64,
    pub weighting: EceWeighting,
    /// Non-empty bins only.
    pub bins: Vec<CalibrationBin>,
    pub predictions: Vec<u32>,
    pub confidences: Vec<f64>,
}

/// Retrieval ECE from stochastic latents. Every latent sample is labeled by
/// its nearest index neighbor; the mode is the prediction and the mode's
/// share of samples the confidence (mode ties go to the smallest label).
pub fn ece_retrieval(
    latents: &[Vec<Vec<f64>>],
    query_labels: &[u32],
    index: &RetrievalIndex,
    bins: usize,
    weighting: EceWeighting,
) -> Result<EceResult> {
    if latents.len() != query_labels.len() || latents.is_empty() {
        return Err(Error::Argument("need one non-empty latent set per query".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    let mut predictions = Vec::with_capacity(latents.len());
    let mut confidences = Vec::with_capacity(latents.len());
    for samples in latents {
        if samples.is_empty() {
            return Err(Error::Argument("query without latent samples".into()));
        }
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for z in samples {
            let nn = knn(index, z, 1)?[0];
            *votes.entry(index.labels[nn]).or_insert(0) += 1;
        }
        let (label, count) = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, c)| (*l, *c))
            .expect("non-empty");
        predictions.push(label);
        confidences.push(count as f64 / samples.len() as f64);
    }

    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf_sum = vec![0.0; bins];
    for ((&pred, &conf), &truth) in predictions.iter().zip(&confidences).zip(query_labels) {
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == truth {
            correct[b] += 1.0;
        }
    }
    let n = predictions.len() as f64;
    let mut ece = 0.0;
    let mut stats = Vec::new();
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        let acc = correct[b] / c;
        let conf = conf_sum[b] / c;
        let w = match weighting {
            EceWeighting::Weighted => c / n,
            EceWeighting::InverseCount => 1.0 / c,
        };
        ece += w * (acc - conf).abs();
        stats.push(CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            accuracy: acc,
            confidence: conf,
        });
    }
    Ok(EceResult {
        ece,
        weighting,
        bins: stats,
        predictions,
        confidences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScored {
    pub id: String,
    /// Higher means more uncertain.
    pub score: f64,
    pub is_ood: Option<bool>,
}

/// AUROC (rank statistic, tied scores share their average rank) and AUPRC
/// (step-interpolated average precision, tied scores form one threshold)
/// with OoD items as the positive class.
pub fn ood_auroc_auprc(scores: &[UncertaintyScored]) -> Result<(f64, f64)> {
    let labeled: Vec<(f64, bool)> = scores
        .iter()
        .map(|s| {
            s.is_ood
                .map(|o| (s.score, o))
                .ok_or_else(|| Error::Argument(format!("item {} has no OoD flag", s.id)))
        })
        .collect::<Result<_>>()?;
    if labeled.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Argument("NaN uncertainty score".into()));
    }
    let n_pos = labeled.iter().filter(|l| l.1).count();
    let n_neg = labeled.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Argument("need both OoD and in-distribution items".into()));
    }

    let mut asc = labeled.clone();
    asc.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < asc.len() {
        let mut j = i;
        while j < asc.len() && asc[j].0 == asc[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * asc[i..j].iter().filter(|l| l.1).count() as f64;
        i = j;
    }
    let auroc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;

    let mut desc = asc;
    desc.reverse();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut auprc = 0.0;
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j < desc.len() && desc[j].0 == desc[i].0 {
            if desc[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok((auroc, auprc))
}

/// Uncertainty score `1/κ̄`, with κ̄ floored at `1e-12`.
pub fn uncertainty_from_kappa(kappa: f64) -> f64 {
    1.0 / kappa.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(angles: &[f64]) -> Vec<Vec<f64>> {
        angles.iter().map(|t| vec![t.cos(), t.sin()]).collect()
    }

    #[test]
    fn knn_ranks_exact_match_first_and_breaks_ties_by_index() {
        let idx = RetrievalIndex::new(circle(&[0.0, 1.0, -1.0, 2.0]), vec![0, 1, 2, 3]).unwrap();
        assert_eq!(knn(&idx, &[1.0, 0.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(knn(&idx, &[1.0, 0.0], 5).is_err());
    }

    #[test]
    fn recall_edge_cases() {
        let emb = circle(&[0.0, 1.0, 2.0]);
        let idx = RetrievalIndex::new(emb.clone(), vec![0, 1, 2]).unwrap();
        let q = Queries { embeddings: &emb, labels: &[0, 1, 2], self_in_index: false };
        assert_eq!(recall_at_k(&q, &idx, 1).unwrap(), 1.0);
        let q = Queries { embeddings: &emb, labels: &[5, 6, 7], self_in_index: false };
        assert_eq!(recall_at_k(&q, &idx, 3).unwrap(), 0.0);
    }

    #[test]
    fn ap_with_hits_at_ranks_one_and_three() {
        // Index sorted by distance from the query at angle 0: ids 0, 1, 2, 3.
        let idx = RetrievalIndex::new(circle(&[0.1, 0.2, 0.3, 0.4]), vec![7, 8, 7, 9]).unwrap();
        let q_emb = circle(&[0.0]);
        let q = Queries { embeddings: &q_emb, labels: &[7], self_in_index: false };
        let ap = average_precision_at_k(&q, &idx, 3).unwrap()[0];
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn sparsification_four_queries() {
        let s = sparsification_ausc(&[0.9, 0.1, 0.2, 0.3], &[0.0, 1.0, 1.0, 1.0], 4).unwrap();
        assert_eq!(s.curve, vec![0.75, 1.0, 1.0, 1.0]);
        // trapezoid: 0.25·(0.875 + 1 + 1) = 0.71875 over a span of 0.75
        assert!((s.ausc - 0.71875 / 0.75).abs() < 1e-15);
        let flat = sparsification_ausc(&[0.3, 0.1, 0.5], &[1.0; 3], 3).unwrap();
        assert_eq!(flat.ausc, 1.0);
    }

    #[test]
    fn auroc_perfect_and_rank_example() {
        let mk = |s: f64, o: bool| UncertaintyScored { id: String::new(), score: s, is_ood: Some(o) };
        let (auroc, auprc) = ood_auroc_auprc(&[mk(0.1, false), mk(0.2, false), mk(0.8, true), mk(0.9, true)]).unwrap();
        assert_eq!((auroc, auprc), (1.0, 1.0));
        // The OoD score is above one of the three ID scores.
        let (auroc, _) = ood_auroc_auprc(&[mk(0.1, false), mk(0.2, true), mk(0.3, false), mk(0.4, false)]).unwrap();
        assert!((auroc - 1.0 / 3.0).abs() < 1e-15);
        let (auroc, _) = ood_auroc_auprc(&[mk(0.5, false), mk(0.5, true)]).unwrap();
        assert_eq!(auroc, 0.5);
    }

    #[test]
    fn ece_calibrated_and_perfect() {
        let idx = RetrievalIndex::new(circle(&[0.0, 3.0]), vec![0, 1]).unwrap();
        let near0 = circle(&[0.05; 10]);
        let r = ece_retrieval(&[near0], &[0], &idx, 15, EceWeighting::Weighted).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.confidences, vec![1.0]);
    }
}
