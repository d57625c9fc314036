//! Succinct partitioned distribution sketches of tabular datasets.
//!
//! A dataset is cut into consecutive partitions of `m` rows. Every partition
//! keeps, for each feature, the number of occurrences per bin. Raw rows are
//! never retained.

mod csv_input;
mod file;
mod ingest;
mod subspace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive, fnv64};

pub use csv_input::{infer_schema, read_csv, read_schema_file, CsvTable, SchemaEntry};
pub use file::{sketch_csv_file, SKETCH_FORMAT, SKETCH_FORMAT_VERSION};
pub use ingest::{ingest_table, quantize_numeric, IngestOptions, Record, Value};
pub use subspace::{Projector, Subspace};

/// Tolerance used when checking that a distribution sums to one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Lowercased, trimmed feature name.
pub fn canonical_name(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Stable identifier of a feature, a pure function of its canonical name.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub u64);

impl FeatureId {
    pub fn from_name(name: &str) -> Self {
        FeatureId(fnv64(canonical_name(name).as_bytes()))
    }
}

impl std::fmt::Display for FeatureId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numeric" | "number" | "num" => Ok(FeatureKind::Numeric),
            "categorical" | "category" | "cat" => Ok(FeatureKind::Categorical),
            other => Err(Error::Ingest(format!("unknown feature kind `{other}`"))),
        }
    }
}

/// Bin structure of a feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// `B + 1` strictly increasing edges; bin `i` covers `[edges[i], edges[i+1])`,
    /// the last bin is closed on the right.
    Numeric { edges: Vec<f64> },
    /// Sorted distinct category tokens; the position is the bin index.
    Categorical { categories: Vec<String> },
}

impl Binning {
    pub fn num_bins(&self) -> usize {
        match self {
            Binning::Numeric { edges } => edges.len().saturating_sub(1),
            Binning::Categorical { categories } => categories.len(),
        }
    }

    /// Bin index of a numeric value. Values outside the edges clamp to the end bins.
    pub fn numeric_bin(&self, x: f64) -> Option<usize> {
        match self {
            Binning::Numeric { edges } => {
                let bins = edges.len() - 1;
                let idx = edges.partition_point(|e| *e <= x);
                Some(idx.saturating_sub(1).min(bins - 1))
            }
            Binning::Categorical { .. } => None,
        }
    }

    pub fn category_bin(&self, token: &str) -> Option<usize> {
        match self {
            Binning::Categorical { categories } => {
                categories.binary_search_by(|c| c.as_str().cmp(token)).ok()
            }
            Binning::Numeric { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub feature_id: FeatureId,
    pub name: String,
    pub binning: Binning,
}

impl FeatureDescriptor {
    pub fn new(name: &str, binning: Binning) -> Result<Self> {
        let d = FeatureDescriptor {
            feature_id: FeatureId::from_name(name),
            name: name.trim().to_string(),
            binning,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn kind(&self) -> FeatureKind {
        match self.binning {
            Binning::Numeric { .. } => FeatureKind::Numeric,
            Binning::Categorical { .. } => FeatureKind::Categorical,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.binning.num_bins()
    }

    /// Dataset-independent token of a bin.
    ///
    /// Numeric bins hash `(name, bin index, B)`, so two datasets only share
    /// tokens when they used the same bin count. Categorical bins hash the
    /// category itself, which keeps tokens aligned when vocabularies differ.
    pub fn bin_label(&self, bin: usize) -> u64 {
        let name = fnv64(canonical_name(&self.name).as_bytes());
        match &self.binning {
            Binning::Numeric { edges } => derive(name, &[1, bin as u64, (edges.len() - 1) as u64]),
            Binning::Categorical { categories } => {
                derive(name, &[2, fnv64(categories[bin].as_bytes())])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_id != FeatureId::from_name(&self.name) {
            return Err(Error::Ingest(format!(
                "feature id {} does not match name `{}`",
                self.feature_id, self.name
            )));
        }
        match &self.binning {
            Binning::Numeric { edges } => {
                if edges.len() < 2 {
                    return Err(Error::Ingest(format!("feature `{}` has no bins", self.name)));
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Ingest(format!(
                        "feature `{}` has non-increasing bin edges",
                        self.name
                    )));
                }
            }
            Binning::Categorical { categories } => {
                if categories.is_empty() {
                    return Err(Error::Ingest(format!("feature `{}` has no categories", self.name)));
                }
                if categories.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Ingest(format!(
                        "feature `{}` has unsorted or duplicate categories",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-bin occurrence counts of one feature inside one partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedFeature {
    pub feature_id: FeatureId,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl BinnedFeature {
    pub fn from_counts(feature_id: FeatureId, counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        BinnedFeature { feature_id, counts, total }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSketch {
    pub partition_index: usize,
    pub rows: u64,
    /// Sorted by feature id.
    pub features: Vec<BinnedFeature>,
}

impl PartitionSketch {
    pub fn feature(&self, id: FeatureId) -> Option<&BinnedFeature> {
        self.features
            .binary_search_by(|f| f.feature_id.cmp(&id))
            .ok()
            .map(|i| &self.features[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSketch {
    pub dataset_id: String,
    /// Sorted by feature id.
    pub descriptors: Vec<FeatureDescriptor>,
    pub partitions: Vec<PartitionSketch>,
    pub partition_size: usize,
    pub total_rows: u64,
    pub bins_per_numeric_feature: u32,
}

impl DatasetSketch {
    pub fn descriptor(&self, id: FeatureId) -> Option<&FeatureDescriptor> {
        self.descriptors
            .binary_search_by(|d| d.feature_id.cmp(&id))
            .ok()
            .map(|i| &self.descriptors[i])
    }

    pub fn feature_ids(&self) -> Vec<FeatureId> {
        self.descriptors.iter().map(|d| d.feature_id).collect()
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Whole-dataset counts of one feature (sum over partitions).
    pub fn aggregate_feature(&self, id: FeatureId) -> Option<BinnedFeature> {
        let bins = self.descriptor(id)?.num_bins();
        let mut counts = vec![0u64; bins];
        for p in &self.partitions {
            if let Some(f) = p.feature(id) {
                for (c, x) in counts.iter_mut().zip(&f.counts) {
                    *c += x;
                }
            }
        }
        Some(BinnedFeature::from_counts(id, counts))
    }

    /// A copy of this sketch with all partitions merged into one.
    pub fn merged(&self) -> DatasetSketch {
        let features = self
            .descriptors
            .iter()
            .filter_map(|d| self.aggregate_feature(d.feature_id))
            .collect();
        DatasetSketch {
            dataset_id: self.dataset_id.clone(),
            descriptors: self.descriptors.clone(),
            partitions: vec![PartitionSketch {
                partition_index: 0,
                rows: self.total_rows,
                features,
            }],
            partition_size: self.total_rows.max(1) as usize,
            total_rows: self.total_rows,
            bins_per_numeric_feature: self.bins_per_numeric_feature,
        }
    }

    /// Check every structural invariant of the sketch.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Ingest(format!("sketch `{}`: {msg}", self.dataset_id)));
        if self.partition_size == 0 {
            return bad("partition size must be at least 1".into());
        }
        if self.partitions.is_empty() {
            return bad("no partitions".into());
        }
        for d in &self.descriptors {
            d.validate()?;
        }
        if self.descriptors.windows(2).any(|w| w[0].feature_id >= w[1].feature_id) {
            return bad("descriptors not sorted by unique feature id".into());
        }
        let mut rows = 0u64;
        let last = self.partitions.len() - 1;
        for (i, p) in self.partitions.iter().enumerate() {
            if p.partition_index != i {
                return bad(format!("partition {i} has index {}", p.partition_index));
            }
            if i < last && p.rows != self.partition_size as u64 {
                return bad(format!("partition {i} has {} rows, expected {}", p.rows, self.partition_size));
            }
            if p.rows == 0 || p.rows > self.partition_size as u64 {
                return bad(format!("partition {i} has {} rows", p.rows));
            }
            if p.features.windows(2).any(|w| w[0].feature_id >= w[1].feature_id) {
                return bad(format!("partition {i} features not sorted by unique id"));
            }
            for f in &p.features {
                let Some(d) = self.descriptor(f.feature_id) else {
                    return bad(format!("partition {i} references unknown feature {}", f.feature_id));
                };
                if f.counts.len() != d.num_bins() {
                    return bad(format!("feature `{}` has {} counts for {} bins", d.name, f.counts.len(), d.num_bins()));
                }
                if f.counts.iter().sum::<u64>() != f.total || f.total > p.rows {
                    return bad(format!("feature `{}` totals are inconsistent in partition {i}", d.name));
                }
            }
            rows += p.rows;
        }
        if rows != self.total_rows {
            return bad(format!("partition rows sum to {rows}, expected {}", self.total_rows));
        }
        Ok(())
    }
}

/// A discrete distribution over a flattened sample space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    entries: Vec<f64>,
}

impl ProbabilityVector {
    /// Wrap entries that must already sum to one.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Normalization(f64::NAN));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Normalization(sum));
        }
        Ok(ProbabilityVector { entries })
    }

    /// Normalize non-negative counts by their grand total.
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        let sum: f64 = counts.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::EmptyDistribution(format!(
                "{} bins with zero total mass",
                counts.len()
            )));
        }
        Ok(ProbabilityVector {
            entries: counts.iter().map(|c| c / sum).collect(),
        })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.entries.len()
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }
}

/// Concatenate the counts of `feature_subset` (ascending feature id) and
/// normalize by the grand total.
pub fn flatten(partition: &PartitionSketch, feature_subset: &[FeatureId]) -> Result<ProbabilityVector> {
    let mut ids = feature_subset.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut counts = Vec::new();
    for id in ids {
        let f = partition.feature(id).ok_or_else(|| {
            Error::Projection(format!(
                "feature {id} not present in partition {}",
                partition.partition_index
            ))
        })?;
        counts.extend(f.counts.iter().map(|&c| c as f64));
    }
    ProbabilityVector::from_counts(&counts)
}

/// Occupied bin tokens of a feature with their multiplicities.
pub fn expand_feature(feature: &BinnedFeature, descriptor: &FeatureDescriptor) -> Vec<(u64, u64)> {
    feature
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(bin, &c)| (descriptor.bin_label(bin), c))
        .collect()
}

/// Distinct tokens of every feature of the whole dataset.
pub fn feature_token_sets(sketch: &DatasetSketch) -> BTreeMap<FeatureId, Vec<u64>> {
    sketch
        .descriptors
        .iter()
        .map(|d| {
            let agg = sketch.aggregate_feature(d.feature_id).expect("descriptor exists");
            let mut tokens: Vec<u64> = expand_feature(&agg, d).into_iter().map(|(t, _)| t).collect();
            tokens.sort_unstable();
            tokens.dedup();
            (d.feature_id, tokens)
        })
        .collect()
}
