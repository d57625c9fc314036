//! Seeded hash families and banding.
//!
//! * MinHash over bin-token sets, for feature overlap (Jaccard).
//! * JS-LSH, the p-stable L2 family applied to `sqrt(P)`, for JS divergence.
//! * Plain L2-LSH on real vectors, for centre distances.
//!
//! Every hash function is a pure function of `(master_seed, band, slot)`.
//! Projection vectors of the p-stable families are keyed by bin *label*
//! rather than coordinate position, so two datasets hashed over the same
//! shared bins see identical projections whatever else each one contains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive, mix64, standard_normal, unit};
use crate::sketch::{ProbabilityVector, NORMALIZATION_TOLERANCE};

const TAG_MINHASH: u64 = 0x4D49_4E48;
const TAG_JS_A: u64 = 0x4A53_4C41;
const TAG_JS_B: u64 = 0x4A53_4C42;
const TAG_L2_A: u64 = 0x4C32_4C41;
const TAG_L2_B: u64 = 0x4C32_4C42;

/// Smallest JS threshold used when deriving a bucket width.
pub const MIN_WIDTH_THRESHOLD: f64 = 1e-6;

pub const DEFAULT_SEED: u64 = 0x00C0_FFEE_5EED_2021;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashParams {
    pub k_per_band: usize,
    pub num_bands: usize,
    pub master_seed: u64,
}

impl Default for MinHashParams {
    fn default() -> Self {
        MinHashParams { k_per_band: 4, num_bands: 32, master_seed: DEFAULT_SEED }
    }
}

impl MinHashParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_band == 0 || self.num_bands == 0 {
            return Err(Error::Invalid("MinHash K and L must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.k_per_band * self.num_bands
    }
}

/// Parameters of the JS-LSH (and L2-LSH) families.
///
/// `r` is the relative bucket width: search derives the absolute width
/// `r * sqrt(2 * t_js)`, i.e. `r` times the Hellinger distance that
/// corresponds to the JS threshold to first order.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsLshParams {
    pub k_per_band: usize,
    pub num_bands: usize,
    pub r: f64,
    pub master_seed: u64,
}

impl Default for JsLshParams {
    fn default() -> Self {
        JsLshParams { k_per_band: 8, num_bands: 16, r: 1.5, master_seed: DEFAULT_SEED }
    }
}

impl JsLshParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_band == 0 || self.num_bands == 0 {
            return Err(Error::Invalid("JS-LSH K and L must be at least 1".into()));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Invalid(format!("JS-LSH r must be positive, got {}", self.r)));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.k_per_band * self.num_bands
    }

    /// Absolute bucket width for a JS threshold.
    pub fn width_for(&self, t_js: f64) -> f64 {
        self.r * (2.0 * t_js.max(MIN_WIDTH_THRESHOLD)).sqrt()
    }

    /// Copy with `r` replaced by an absolute width.
    pub fn with_width(&self, width: f64) -> JsLshParams {
        JsLshParams { r: width, ..*self }
    }
}

/// One band's concatenated hash values.
///
/// MinHash values are raw 64-bit hashes; p-stable bucket indices are signed
/// and stored bit-cast.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signature {
    pub band_index: u32,
    pub values: Vec<u64>,
}

/// Fraction of hash slots that agree across two signature lists.
pub fn slot_agreement(a: &[Signature], b: &[Signature]) -> f64 {
    let mut equal = 0usize;
    let mut total = 0usize;
    for (x, y) in a.iter().zip(b) {
        debug_assert_eq!(x.band_index, y.band_index);
        equal += x.values.iter().zip(&y.values).filter(|(u, v)| u == v).count();
        total += x.values.len().max(y.values.len());
    }
    if total == 0 {
        0.0
    } else {
        equal as f64 / total as f64
    }
}

/// True when any band matches on its full concatenation.
pub fn any_band_collides(a: &[Signature], b: &[Signature]) -> bool {
    a.iter().zip(b).any(|(x, y)| x.values == y.values)
}

// ---------------------------------------------------------------------------
// MinHash

/// Precomputed MinHash family.
#[derive(Clone, Debug)]
pub struct MinHasher {
    params: MinHashParams,
    seeds: Vec<u64>,
}

impl MinHasher {
    pub fn new(params: MinHashParams) -> Result<Self> {
        params.validate()?;
        let seeds = (0..params.num_bands)
            .flat_map(|b| {
                (0..params.k_per_band)
                    .map(move |k| derive(params.master_seed, &[TAG_MINHASH, b as u64, k as u64]))
            })
            .collect();
        Ok(MinHasher { params, seeds })
    }

    pub fn params(&self) -> &MinHashParams {
        &self.params
    }

    #[inline]
    fn hash(seed: u64, token: u64) -> u64 {
        mix64(mix64(token) ^ seed)
    }

    /// One signature per band. Fails on an empty token set.
    pub fn signatures(&self, tokens: &[u64]) -> Result<Vec<Signature>> {
        if tokens.is_empty() {
            return Err(Error::Signature("cannot MinHash an empty token set".into()));
        }
        let mins: Vec<u64> = self
            .seeds
            .iter()
            .map(|&s| tokens.iter().map(|&t| Self::hash(s, t)).min().unwrap())
            .collect();
        Ok(mins
            .chunks(self.params.k_per_band)
            .enumerate()
            .map(|(b, c)| Signature { band_index: b as u32, values: c.to_vec() })
            .collect())
    }
}

pub fn minhash_signatures(tokens: &[u64], params: &MinHashParams) -> Result<Vec<Signature>> {
    MinHasher::new(*params)?.signatures(tokens)
}

// ---------------------------------------------------------------------------
// p-stable families

/// `ceil((a . x + b) / width)`.
#[inline]
pub fn p_stable_hash(a: &[f64], b: f64, width: f64, x: &[f64]) -> i64 {
    let dot: f64 = a.iter().zip(x).map(|(u, v)| u * v).sum();
    ((dot + b) / width).ceil() as i64
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PStableKind {
    /// Hashes `sqrt(P)` of a normalized distribution.
    JensenShannon,
    /// Hashes the vector as given.
    Euclidean,
}

impl PStableKind {
    fn tags(self) -> (u64, u64) {
        match self {
            PStableKind::JensenShannon => (TAG_JS_A, TAG_JS_B),
            PStableKind::Euclidean => (TAG_L2_A, TAG_L2_B),
        }
    }
}

fn projection_component(kind: PStableKind, seed: u64, band: usize, slot: usize, label: u64) -> f64 {
    standard_normal(derive(seed, &[kind.tags().0, band as u64, slot as u64, label]))
}

fn offset(kind: PStableKind, seed: u64, band: usize, slot: usize, width: f64) -> f64 {
    unit(derive(seed, &[kind.tags().1, band as u64, slot as u64])) * width
}

/// A p-stable family materialized over a labelled coordinate space.
///
/// `params.r` is used as the absolute bucket width.
#[derive(Clone, Debug)]
pub struct PStableFamily {
    kind: PStableKind,
    params: JsLshParams,
    dimension: usize,
    /// `[band][slot][coordinate]`
    projections: Vec<f64>,
    offsets: Vec<f64>,
}

impl PStableFamily {
    pub fn new(kind: PStableKind, params: JsLshParams, labels: &[u64]) -> Result<Self> {
        params.validate()?;
        let d = labels.len();
        let mut projections = Vec::with_capacity(params.num_slots() * d);
        let mut offsets = Vec::with_capacity(params.num_slots());
        for band in 0..params.num_bands {
            for slot in 0..params.k_per_band {
                projections.extend(
                    labels
                        .iter()
                        .map(|&l| projection_component(kind, params.master_seed, band, slot, l)),
                );
                offsets.push(offset(kind, params.master_seed, band, slot, params.r));
            }
        }
        Ok(PStableFamily { kind, params, dimension: d, projections, offsets })
    }

    pub fn params(&self) -> &JsLshParams {
        &self.params
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn prepare(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dimension {
            return Err(Error::Dimension { left: x.len(), right: self.dimension });
        }
        Ok(match self.kind {
            PStableKind::JensenShannon => {
                let sum: f64 = x.iter().sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || x.iter().any(|v| *v < 0.0) {
                    return Err(Error::Normalization(sum));
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            PStableKind::Euclidean => x.to_vec(),
        })
    }

    /// All `L * K` bucket indices, band-major.
    pub fn hash_values(&self, x: &[f64]) -> Result<Vec<i64>> {
        let x = self.prepare(x)?;
        let d = self.dimension;
        Ok(self
            .offsets
            .iter()
            .enumerate()
            .map(|(i, &b)| p_stable_hash(&self.projections[i * d..(i + 1) * d], b, self.params.r, &x))
            .collect())
    }

    pub fn signatures(&self, x: &[f64]) -> Result<Vec<Signature>> {
        let values = self.hash_values(x)?;
        Ok(values
            .chunks(self.params.k_per_band)
            .enumerate()
            .map(|(b, c)| Signature {
                band_index: b as u32,
                values: c.iter().map(|&v| v as u64).collect(),
            })
            .collect())
    }
}

fn check_labels(dimension: usize, labels: &[u64]) -> Result<()> {
    if labels.len() != dimension {
        return Err(Error::Dimension { left: dimension, right: labels.len() });
    }
    Ok(())
}

/// A single JS-LSH value for `(band, slot)`, with `params.r` as the bucket width.
pub fn jslsh_hash(
    p: &ProbabilityVector,
    band: usize,
    slot: usize,
    params: &JsLshParams,
    dimension_labels: &[u64],
) -> Result<i64> {
    params.validate()?;
    check_labels(p.dimension(), dimension_labels)?;
    let sum: f64 = p.entries().iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Normalization(sum));
    }
    let kind = PStableKind::JensenShannon;
    let a: Vec<f64> = dimension_labels
        .iter()
        .map(|&l| projection_component(kind, params.master_seed, band, slot, l))
        .collect();
    let b = offset(kind, params.master_seed, band, slot, params.r);
    let x: Vec<f64> = p.entries().iter().map(|v| v.sqrt()).collect();
    Ok(p_stable_hash(&a, b, params.r, &x))
}

pub fn jslsh_signatures(
    p: &ProbabilityVector,
    params: &JsLshParams,
    dimension_labels: &[u64],
) -> Result<Vec<Signature>> {
    check_labels(p.dimension(), dimension_labels)?;
    PStableFamily::new(PStableKind::JensenShannon, *params, dimension_labels)?.signatures(p.entries())
}

pub fn l2lsh_signatures(v: &[f64], params: &JsLshParams, dimension_labels: &[u64]) -> Result<Vec<Signature>> {
    check_labels(v.len(), dimension_labels)?;
    PStableFamily::new(PStableKind::Euclidean, *params, dimension_labels)?.signatures(v)
}

// ---------------------------------------------------------------------------
// Estimation from slot agreement

/// Collision probability of one Gaussian p-stable hash at distance `c`.
pub fn pstable_collision_probability(distance: f64, width: f64) -> f64 {
    if distance <= 0.0 {
        return 1.0;
    }
    let s = width / distance;
    let tail = statrs::function::erf::erfc(s / std::f64::consts::SQRT_2); // 2 * Phi(-s)
    let p = 1.0 - tail - 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * s) * (1.0 - (-s * s / 2.0).exp());
    p.clamp(0.0, 1.0)
}

/// Invert [`pstable_collision_probability`] for an observed agreement
/// fraction, capped at `max_distance`.
pub fn estimate_distance(agreement: f64, width: f64, max_distance: f64) -> f64 {
    if agreement >= 1.0 {
        return 0.0;
    }
    if agreement <= pstable_collision_probability(max_distance, width) {
        return max_distance;
    }
    let (mut lo, mut hi) = (0.0, max_distance);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if pstable_collision_probability(mid, width) > agreement {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// First-order JS estimate from the Hellinger (L2 of square roots) distance.
pub fn js_from_hellinger_distance(distance: f64) -> f64 {
    (0.5 * distance * distance).min(std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(x: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn p_stable_hash_hand_value() {
        assert_eq!(p_stable_hash(&[2.0], 0.5, 1.0, &[1.0f64.sqrt()]), 3);
        assert_eq!(p_stable_hash(&[1.0, 1.0], 0.0, 2.0, &[1.0, 1.0]), 1);
    }

    #[test]
    fn minhash_shape_and_determinism() {
        let p = MinHashParams { k_per_band: 3, num_bands: 5, master_seed: 9 };
        let a = minhash_signatures(&[1, 2, 3], &p).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|s| s.values.len() == 3));
        assert_eq!(a, minhash_signatures(&[3, 2, 1, 1], &p).unwrap());
        let other = MinHashParams { master_seed: 10, ..p };
        assert_ne!(a, minhash_signatures(&[1, 2, 3], &other).unwrap());
        assert!(matches!(minhash_signatures(&[], &p), Err(Error::Signature(_))));
    }

    #[test]
    fn jslsh_shape_and_identity() {
        let params = JsLshParams { k_per_band: 2, num_bands: 4, ..Default::default() };
        let labels = [11, 22, 33];
        let p = pv(&[0.2, 0.3, 0.5]);
        let s = jslsh_signatures(&p, &params, &labels).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|x| x.values.len() == 2));
        assert_eq!(s, jslsh_signatures(&pv(&[0.2, 0.3, 0.5]), &params, &labels).unwrap());
        for (b, sig) in s.iter().enumerate() {
            for k in 0..2 {
                assert_eq!(jslsh_hash(&p, b, k, &params, &labels).unwrap() as u64, sig.values[k]);
            }
        }
    }

    #[test]
    fn jslsh_rejects_bad_input() {
        let params = JsLshParams::default();
        let unnormalized = ProbabilityVector::from_counts(&[1.0, 1.0]).unwrap();
        assert!(jslsh_hash(&unnormalized, 0, 0, &params, &[1]).is_err());
        let fam = PStableFamily::new(PStableKind::JensenShannon, params, &[1, 2]).unwrap();
        assert!(matches!(fam.hash_values(&[0.5, 0.6]), Err(Error::Normalization(_))));
        assert!(matches!(fam.hash_values(&[1.0]), Err(Error::Dimension { .. })));
        let bad = JsLshParams { r: 0.0, ..params };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn projections_follow_labels_not_positions() {
        let params = JsLshParams::default();
        // same distribution on shared labels 5 and 7, embedded in two different parents
        let a = PStableFamily::new(PStableKind::JensenShannon, params, &[5, 7, 100]).unwrap();
        let b = PStableFamily::new(PStableKind::JensenShannon, params, &[200, 300, 7, 5]).unwrap();
        let ha = a.hash_values(&[0.25, 0.75, 0.0]).unwrap();
        let hb = b.hash_values(&[0.0, 0.0, 0.75, 0.25]).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn l2lsh_identity() {
        let params = JsLshParams::default();
        let s1 = l2lsh_signatures(&[0.3, 0.4], &params, &[1, 2]).unwrap();
        let s2 = l2lsh_signatures(&[0.3, 0.4], &params, &[1, 2]).unwrap();
        assert_eq!(s1, s2);
        let js = jslsh_signatures(&pv(&[0.5, 0.5]), &params, &[1, 2]).unwrap();
        let l2 = l2lsh_signatures(&[0.5, 0.5], &params, &[1, 2]).unwrap();
        assert_ne!(js, l2);
    }

    #[test]
    fn collision_probability_shape() {
        assert_eq!(pstable_collision_probability(0.0, 1.0), 1.0);
        let mut prev = 1.0;
        for i in 1..50 {
            let p = pstable_collision_probability(i as f64 * 0.1, 1.0);
            assert!(p < prev);
            prev = p;
        }
        let c = 0.37;
        let p = pstable_collision_probability(c, 0.8);
        assert!((estimate_distance(p, 0.8, 2.0) - c).abs() < 1e-9);
        assert_eq!(estimate_distance(1.0, 0.8, 2.0), 0.0);
        assert_eq!(estimate_distance(0.0, 0.8, 2.0), 2.0);
    }

    #[test]
    fn width_scales_with_threshold() {
        let p = JsLshParams { r: 2.0, ..Default::default() };
        assert!((p.width_for(0.5) - 2.0).abs() < 1e-12);
        assert!(p.width_for(0.0) > 0.0);
    }
}
