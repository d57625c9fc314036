//! Exact similarity measurements between distributions and datasets.
//!
//! These are the reference implementations behind every LSH-accelerated
//! path in [`crate::search`]. All logarithms are natural (nats).

use std::collections::{BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::{DatasetSketch, FeatureId, ProbabilityVector, Subspace};

/// Smoothing mass for the opt-in smoothed KL variant.
pub const KL_SMOOTHING_EPSILON: f64 = 1e-9;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Kl,
    Js,
    HellingerSq,
    Jaccard,
    L2Center,
    Adaptivity,
}

/// Marks values that follow a convention rather than the formula.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// `P(x) > 0` where `Q(x) = 0`; the KL value is `+inf`.
    InfiniteDivergence,
    /// Both token sets were empty; Jaccard reported as 0.
    EmptyInputs,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<MetricFlag>,
}

impl MetricValue {
    fn new(kind: MetricKind, value: f64) -> Self {
        MetricValue { value, kind, flag: None }
    }

    pub fn is_infinite(&self) -> bool {
        self.flag == Some(MetricFlag::InfiniteDivergence)
    }
}

/// Convert a value in nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

fn check_dims(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension { left: p.len(), right: q.len() });
    }
    Ok(())
}

/// `sum P(x) ln(P(x)/Q(x))` over the support of `P`.
pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<MetricValue> {
    check_dims(p.entries(), q.entries())?;
    let mut sum = 0.0;
    for (&a, &b) in p.entries().iter().zip(q.entries()) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(MetricValue {
                    value: f64::INFINITY,
                    kind: MetricKind::Kl,
                    flag: Some(MetricFlag::InfiniteDivergence),
                });
            }
            sum += a * (a / b).ln();
        }
    }
    Ok(MetricValue::new(MetricKind::Kl, sum.max(0.0)))
}

/// KL after adding `epsilon` to every entry of both sides and renormalizing.
pub fn kl_divergence_smoothed(
    p: &ProbabilityVector,
    q: &ProbabilityVector,
    epsilon: f64,
) -> Result<MetricValue> {
    check_dims(p.entries(), q.entries())?;
    let smooth = |v: &ProbabilityVector| {
        let counts: Vec<f64> = v.entries().iter().map(|x| x + epsilon).collect();
        ProbabilityVector::from_counts(&counts)
    };
    kl_divergence(&smooth(p)?, &smooth(q)?)
}

/// Jensen-Shannon divergence of two equal-length distributions, in nats.
pub fn js_slices(p: &[f64], q: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            sum += a * (a / m).ln();
        }
        if b > 0.0 {
            sum += b * (b / m).ln();
        }
    }
    (0.5 * sum).clamp(0.0, std::f64::consts::LN_2)
}

pub fn js_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<MetricValue> {
    check_dims(p.entries(), q.entries())?;
    Ok(MetricValue::new(MetricKind::Js, js_slices(p.entries(), q.entries())))
}

/// `1 - sum sqrt(P(x) Q(x))`.
pub fn hellinger_sq(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<MetricValue> {
    check_dims(p.entries(), q.entries())?;
    let bc: f64 = p.entries().iter().zip(q.entries()).map(|(a, b)| (a * b).sqrt()).sum();
    Ok(MetricValue::new(MetricKind::HellingerSq, (1.0 - bc).clamp(0.0, 1.0)))
}

/// Jaccard similarity of the distinct elements of two token collections.
pub fn jaccard<T: Eq + Hash>(a: &[T], b: &[T]) -> MetricValue {
    let a: HashSet<&T> = a.iter().collect();
    let b: HashSet<&T> = b.iter().collect();
    if a.is_empty() && b.is_empty() {
        return MetricValue {
            value: 0.0,
            kind: MetricKind::Jaccard,
            flag: Some(MetricFlag::EmptyInputs),
        };
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    MetricValue::new(MetricKind::Jaccard, inter as f64 / union as f64)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Euclidean distance between the row-weighted mean partition distributions
/// of two datasets over the shared features.
pub fn l2_center_distance(
    source: &DatasetSketch,
    target: &DatasetSketch,
    shared: &[FeatureId],
) -> Result<MetricValue> {
    let space = Subspace::shared(source, target, shared)?;
    let a = space.projector(source)?.center(source)?;
    let b = space.projector(target)?.center(target)?;
    Ok(MetricValue::new(MetricKind::L2Center, l2_distance(&a, &b)?))
}

/// How matched pairs turn into an adaptivity numerator.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptivityMode {
    /// Target partitions with at least one matching source partition.
    #[default]
    DistinctTargets,
    /// Every matching `(source, target)` pair; may exceed `nt`.
    PairCount,
}

/// Numerator of the adaptivity ratio for a set of `(source, target)` pairs.
pub fn adaptivity_numerator(pairs: &BTreeSet<(usize, usize)>, mode: AdaptivityMode) -> usize {
    match mode {
        AdaptivityMode::DistinctTargets => pairs.iter().map(|&(_, j)| j).collect::<BTreeSet<_>>().len(),
        AdaptivityMode::PairCount => pairs.len(),
    }
}

/// All `(source partition, target partition)` pairs with `JS <= t`.
pub fn exact_partition_matches(
    source: &DatasetSketch,
    target: &DatasetSketch,
    shared: &[FeatureId],
    t: f64,
) -> Result<BTreeSet<(usize, usize)>> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Invalid(format!("JS threshold must be non-negative, got {t}")));
    }
    let space = Subspace::shared(source, target, shared)?;
    let ps = space.projector(source)?.partitions(source)?;
    let qs = space.projector(target)?.partitions(target)?;
    let mut pairs = BTreeSet::new();
    for (i, p) in ps.iter().enumerate() {
        for (j, q) in qs.iter().enumerate() {
            if js_slices(p.entries(), q.entries()) <= t {
                pairs.insert((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Fraction of target partitions within JS `t` of some source partition.
pub fn exact_adaptivity(
    source: &DatasetSketch,
    target: &DatasetSketch,
    shared: &[FeatureId],
    t: f64,
) -> Result<MetricValue> {
    exact_adaptivity_with(source, target, shared, t, AdaptivityMode::DistinctTargets)
}

pub fn exact_adaptivity_with(
    source: &DatasetSketch,
    target: &DatasetSketch,
    shared: &[FeatureId],
    t: f64,
    mode: AdaptivityMode,
) -> Result<MetricValue> {
    let pairs = exact_partition_matches(source, target, shared, t)?;
    let nt = target.num_partitions();
    Ok(MetricValue::new(
        MetricKind::Adaptivity,
        adaptivity_numerator(&pairs, mode) as f64 / nt as f64,
    ))
}
