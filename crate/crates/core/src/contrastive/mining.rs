//! Pair mining: uniform sampling or batch-hard selection of ordered pairs.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::pairs::{classify_pair, minibatch_targets_for_mode, MarginConfig, PairBatch, TargetMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    #[default]
    Random,
    BatchHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub strategy: MiningStrategy,
    /// Points sampled before batch-hard selection; `None` uses every point.
    #[serde(default)]
    pub chunk_size: Option<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mine a batch of ordered pairs and assign minibatch targets.
///
/// Positive and negative pairs are drawn separately so the batch carries
/// the counts `|B_pos|`, `|B_neg|` that the target rescaling needs.
pub fn mine_pairs<R: Rng + ?Sized>(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    config: &MiningConfig,
    margin: &MarginConfig,
    mode: &TargetMode,
    rng: &mut R,
) -> Result<PairBatch> {
    let n = embeddings.len();
    if n != labels.len() {
        return Err(Error::Dimension {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    if config.n_pos + config.n_neg == 0 {
        return Err(Error::Mining("requested an empty batch".into()));
    }
    let mut class_sizes = BTreeMap::new();
    for &l in labels {
        *class_sizes.entry(l).or_insert(0usize) += 1;
    }

    let pool: Vec<usize> = match (config.strategy, config.chunk_size) {
        (MiningStrategy::BatchHard, Some(c)) if c < n => {
            let mut idx = index::sample(rng, n, c).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for &i in &pool {
        for &j in &pool {
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    if config.n_pos > positives.len() {
        return Err(Error::Mining(format!(
            "asked for {} positive pairs, only {} available",
            config.n_pos,
            positives.len()
        )));
    }
    if config.n_neg > negatives.len() {
        return Err(Error::Mining(format!(
            "asked for {} negative pairs, only {} available",
            config.n_neg,
            negatives.len()
        )));
    }

    let (pos, neg) = match config.strategy {
        MiningStrategy::Random => {
            let pos = index::sample(rng, positives.len(), config.n_pos)
                .into_iter()
                .map(|k| positives[k])
                .collect::<Vec<_>>();
            let neg = index::sample(rng, negatives.len(), config.n_neg)
                .into_iter()
                .map(|k| negatives[k])
                .collect::<Vec<_>>();
            (pos, neg)
        }
        MiningStrategy::BatchHard => {
            let key = |&(i, j): &(usize, usize)| sq_dist(&embeddings[i], &embeddings[j]);
            // Farthest positives first, closest negatives first; ties by index.
            positives.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
            negatives.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
            (
                positives[..config.n_pos].to_vec(),
                negatives[..config.n_neg].to_vec(),
            )
        }
    };

    let effective = mode.effective_margin(margin);
    let triples: Vec<_> = pos
        .into_iter()
        .chain(neg)
        .map(|(i, j)| {
            let kind = classify_pair(&embeddings[i], &embeddings[j], labels[i] == labels[j], &effective);
            (i, j, kind)
        })
        .collect();
    minibatch_targets_for_mode(&triples, &class_sizes, mode)
}
