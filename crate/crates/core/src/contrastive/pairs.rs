//! Labeled data, ordered pairs and their targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub id: String,
    pub x: Vec<f64>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint>) -> Result<Self> {
        let ds = Dataset { points };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.points.first() else {
            return Err(Error::InvalidDataset("dataset has no points".into()));
        };
        let dim = first.x.len();
        if dim == 0 {
            return Err(Error::InvalidDataset("points have no features".into()));
        }
        if let Some(p) = self.points.iter().find(|p| p.x.len() != dim) {
            return Err(Error::InvalidDataset(format!(
                "point {} has {} features, expected {dim}",
                p.id,
                p.x.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.x.len())
    }

    pub fn labels(&self) -> Vec<u32> {
        self.points.iter().map(|p| p.label).collect()
    }

    pub fn class_sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for p in &self.points {
            *sizes.entry(p.label).or_insert(0) += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Positive,
    NegativeInside,
    NegativeOutside,
}

impl PairKind {
    pub fn is_negative(self) -> bool {
        !matches!(self, PairKind::Positive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub kind: PairKind,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginConvention {
    /// Inside the margin when `‖z_i − z_j‖² ≤ m`.
    Squared,
    /// Inside the margin when `‖z_i − z_j‖ ≤ m`.
    #[default]
    Unsquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub m: f64,
    #[serde(default)]
    pub convention: MarginConvention,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m: 0.5,
            convention: MarginConvention::Unsquared,
        }
    }
}

impl MarginConfig {
    pub fn new(m: f64, convention: MarginConvention) -> Result<Self> {
        let cfg = MarginConfig { m, convention };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::Argument(format!("margin must be positive, got {}", self.m)));
        }
        Ok(())
    }

    /// A margin that places every pair of unit vectors inside it.
    pub fn covering() -> Self {
        MarginConfig {
            m: 4.0,
            convention: MarginConvention::Squared,
        }
    }

    pub fn is_inside(&self, zi: &[f64], zj: &[f64]) -> bool {
        let sq: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
        match self.convention {
            MarginConvention::Squared => sq <= self.m,
            MarginConvention::Unsquared => sq.sqrt() <= self.m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TargetMode {
    /// `1/|𝒟²_pos|` for positives and `−1/|𝒟²_neg|` for negatives inside the margin.
    #[default]
    Balanced,
    /// `+κ` / `−κ`, with every negative treated as inside the margin.
    Vmf { kappa: f64 },
}

impl TargetMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TargetMode::Balanced => Ok(()),
            TargetMode::Vmf { kappa } if kappa > 0.0 && kappa.is_finite() => Ok(()),
            TargetMode::Vmf { kappa } => Err(Error::Argument(format!(
                "vmf target needs kappa > 0, got {kappa}"
            ))),
        }
    }

    /// The margin actually used for classification under this mode.
    pub fn effective_margin(&self, margin: &MarginConfig) -> MarginConfig {
        match self {
            TargetMode::Balanced => *margin,
            TargetMode::Vmf { .. } => MarginConfig::covering(),
        }
    }
}

/// Kind of the ordered pair `(i, j)`. Self-pairs are positive.
pub fn classify_pair(zi: &[f64], zj: &[f64], same_label: bool, margin: &MarginConfig) -> PairKind {
    if same_label {
        PairKind::Positive
    } else if margin.is_inside(zi, zj) {
        PairKind::NegativeInside
    } else {
        PairKind::NegativeOutside
    }
}

/// Kinds of all `N²` ordered pairs, row-major in `(i, j)`.
pub fn classify_pairs(embeddings: &[Vec<f64>], labels: &[u32], margin: &MarginConfig) -> Vec<PairKind> {
    debug_assert!(embeddings.iter().all(|z| (norm(z) - 1.0).abs() < 1e-6));
    let n = embeddings.len();
    let mut kinds = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            kinds.push(classify_pair(&embeddings[i], &embeddings[j], labels[i] == labels[j], margin));
        }
    }
    kinds
}

/// `(|𝒟²_pos|, |𝒟²_neg|)` from class sizes: `Σ_c |𝒟_c|²` and `Σ_{c≠c'} |𝒟_c||𝒟_c'|`.
pub fn pair_counts(class_sizes: &BTreeMap<u32, usize>) -> (usize, usize) {
    let total: usize = class_sizes.values().sum();
    let pos: usize = class_sizes.values().map(|s| s * s).sum();
    (pos, total * total - pos)
}

/// A set of ordered pairs with targets, plus the factor that turns
/// `Σ ℒ_y` over the pairs into an estimate of the full dataset loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    /// `|𝒟²| / |B|`; 1 for the full pair set.
    pub scale: f64,
    pub counts: BatchCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchCounts {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_neg_inside: usize,
    pub d2_total: usize,
}

impl BatchCounts {
    fn from_kinds(kinds: impl Iterator<Item = PairKind>, d2_total: usize) -> Self {
        let mut c = BatchCounts {
            d2_total,
            ..Default::default()
        };
        for k in kinds {
            match k {
                PairKind::Positive => c.n_pos += 1,
                PairKind::NegativeInside => {
                    c.n_neg += 1;
                    c.n_neg_inside += 1;
                }
                PairKind::NegativeOutside => c.n_neg += 1,
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.n_pos + self.n_neg
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Targets for every ordered pair of the dataset.
pub fn full_targets(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    margin: &MarginConfig,
    mode: &TargetMode,
) -> Result<PairBatch> {
    if embeddings.is_empty() {
        return Err(Error::InvalidDataset("dataset has no points".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension {
            what: "labels",
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    mode.validate()?;
    let margin = mode.effective_margin(margin);
    let n = embeddings.len();
    let kinds = classify_pairs(embeddings, labels, &margin);
    let counts = BatchCounts::from_kinds(kinds.iter().copied(), n * n);
    let (y_pos, y_neg) = match *mode {
        TargetMode::Balanced => (
            1.0 / counts.n_pos as f64,
            if counts.n_neg > 0 { -1.0 / counts.n_neg as f64 } else { 0.0 },
        ),
        TargetMode::Vmf { kappa } => (kappa, -kappa),
    };
    let pairs = kinds
        .into_iter()
        .enumerate()
        .map(|(idx, kind)| Pair {
            i: idx / n,
            j: idx % n,
            kind,
            target: target_for(kind, y_pos, y_neg),
        })
        .collect();
    Ok(PairBatch {
        pairs,
        scale: 1.0,
        counts,
    })
}

fn target_for(kind: PairKind, y_pos: f64, y_neg: f64) -> f64 {
    match kind {
        PairKind::Positive => y_pos,
        PairKind::NegativeInside => y_neg,
        PairKind::NegativeOutside => 0.0,
    }
}

/// Rescaled targets for a minibatch of pairs `B ⊆ 𝒟²`:
/// `|B|/(|𝒟²||B_pos|)` for positives, `−|B|/(|𝒟²||B_neg|)` for negatives
/// inside the margin, 0 outside. `|B_neg|` counts negatives on both sides
/// of the margin. The returned batch carries `scale = |𝒟²|/|B|`.
pub fn minibatch_targets(
    pairs: &[(usize, usize, PairKind)],
    d2_total: usize,
) -> Result<PairBatch> {
    let counts = BatchCounts::from_kinds(pairs.iter().map(|p| p.2), d2_total);
    if counts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if d2_total == 0 {
        return Err(Error::Argument("|𝒟²| must be positive".into()));
    }
    let b = counts.len() as f64;
    let d2 = d2_total as f64;
    let y_pos = if counts.n_pos > 0 { b / (d2 * counts.n_pos as f64) } else { 0.0 };
    let y_neg = if counts.n_neg > 0 { -b / (d2 * counts.n_neg as f64) } else { 0.0 };
    Ok(PairBatch {
        pairs: pairs
            .iter()
            .map(|&(i, j, kind)| Pair {
                i,
                j,
                kind,
                target: target_for(kind, y_pos, y_neg),
            })
            .collect(),
        scale: d2 / b,
        counts,
    })
}

/// Minibatch targets under an arbitrary target mode. Balanced mode is
/// exactly [`minibatch_targets`]; vMF mode rescales `±κ` so that each pair
/// group still estimates its full-dataset sum.
pub fn minibatch_targets_for_mode(
    pairs: &[(usize, usize, PairKind)],
    class_sizes: &BTreeMap<u32, usize>,
    mode: &TargetMode,
) -> Result<PairBatch> {
    let (d2_pos, d2_neg) = pair_counts(class_sizes);
    let d2_total = d2_pos + d2_neg;
    let mut batch = minibatch_targets(pairs, d2_total)?;
    if let TargetMode::Vmf { kappa } = *mode {
        mode.validate()?;
        for p in &mut batch.pairs {
            p.target *= match p.kind {
                PairKind::Positive => kappa * d2_pos as f64,
                _ => kappa * d2_neg as f64,
            };
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn same_label_is_positive_regardless_of_distance() {
        let m = MarginConfig::default();
        assert_eq!(classify_pair(&unit(0.0), &unit(3.0), true, &m), PairKind::Positive);
    }

    #[test]
    fn antipodal_negative_is_outside_small_margin() {
        let m = MarginConfig::new(0.5, MarginConvention::Unsquared).unwrap();
        assert_eq!(
            classify_pair(&[1.0, 0.0], &[-1.0, 0.0], false, &m),
            PairKind::NegativeOutside
        );
    }

    #[test]
    fn margin_conventions_differ() {
        // distance 0.8: squared 0.64
        let zi = [1.0f64, 0.0];
        let zj = [0.68, 0.7332121111929344];
        let d = ((zi[0] - zj[0]) * (zi[0] - zj[0]) + zj[1] * zj[1]).sqrt();
        assert!((d - 0.8).abs() < 1e-6);
        let sq = MarginConfig::new(0.7, MarginConvention::Squared).unwrap();
        let un = MarginConfig::new(0.7, MarginConvention::Unsquared).unwrap();
        assert!(sq.is_inside(&zi, &zj));
        assert!(!un.is_inside(&zi, &zj));
        assert!(MarginConfig::new(0.0, MarginConvention::Squared).is_err());
    }

    #[test]
    fn targets_for_classes_two_and_three() {
        // Ordered pairs including self-pairs: 2² + 3² = 13 positive, 2·2·3 = 12 negative.
        let emb: Vec<Vec<f64>> = (0..5).map(|k| unit(0.01 * k as f64)).collect();
        let labels = [0, 0, 1, 1, 1];
        let batch = full_targets(&emb, &labels, &MarginConfig::default(), &TargetMode::Balanced).unwrap();
        assert_eq!(batch.counts.n_pos, 13);
        assert_eq!(batch.counts.n_neg, 12);
        assert_eq!(batch.counts.n_neg_inside, 12);
        for p in &batch.pairs {
            let expected = match p.kind {
                PairKind::Positive => 1.0 / 13.0,
                PairKind::NegativeInside => -1.0 / 12.0,
                PairKind::NegativeOutside => 0.0,
            };
            assert_eq!(p.target, expected);
        }
        let sizes = BTreeMap::from([(0, 2), (1, 3)]);
        assert_eq!(pair_counts(&sizes), (13, 12));
    }

    #[test]
    fn single_class_targets_are_one_over_d_squared() {
        let emb: Vec<Vec<f64>> = (0..4).map(|k| unit(k as f64)).collect();
        let batch = full_targets(&emb, &[3; 4], &MarginConfig::default(), &TargetMode::Balanced).unwrap();
        assert!(batch.pairs.iter().all(|p| p.target == 1.0 / 16.0));
    }

    #[test]
    fn vmf_targets_cover_the_sphere() {
        let emb = vec![unit(0.0), unit(std::f64::consts::PI), unit(1.0)];
        let batch = full_targets(&emb, &[0, 1, 0], &MarginConfig::default(), &TargetMode::Vmf { kappa: 1.0 }).unwrap();
        assert_eq!(batch.counts.n_neg, batch.counts.n_neg_inside);
        for p in &batch.pairs {
            assert_eq!(p.target, if p.kind == PairKind::Positive { 1.0 } else { -1.0 });
        }
        assert!(TargetMode::Vmf { kappa: 0.0 }.validate().is_err());
    }

    #[test]
    fn minibatch_positive_target() {
        // |B| = 10, |B_pos| = 4, |𝒟²| = 25 → 10 / (25·4) = 0.1
        let mut pairs = vec![(0, 0, PairKind::Positive); 4];
        pairs.extend(vec![(0, 1, PairKind::NegativeInside); 6]);
        let batch = minibatch_targets(&pairs, 25).unwrap();
        assert!((batch.pairs[0].target - 0.1).abs() < 1e-15);
        assert!((batch.pairs[5].target + 10.0 / (25.0 * 6.0)).abs() < 1e-15);
        assert_eq!(batch.scale, 2.5);
        assert!(matches!(minibatch_targets(&[], 25), Err(Error::EmptyBatch)));
    }

    #[test]
    fn full_minibatch_reduces_to_full_targets() {
        let emb: Vec<Vec<f64>> = (0..5).map(|k| unit(0.7 * k as f64)).collect();
        let labels = [0, 1, 0, 1, 1];
        let m = MarginConfig::new(1.2, MarginConvention::Unsquared).unwrap();
        let full = full_targets(&emb, &labels, &m, &TargetMode::Balanced).unwrap();
        let triples: Vec<_> = full.pairs.iter().map(|p| (p.i, p.j, p.kind)).collect();
        let mb = minibatch_targets(&triples, 25).unwrap();
        assert_eq!(mb.scale, 1.0);
        for (a, b) in full.pairs.iter().zip(&mb.pairs) {
            assert!((a.target - b.target).abs() < 1e-15);
        }
    }
}
