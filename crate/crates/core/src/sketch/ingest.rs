use std::collections::{BTreeMap, BTreeSet};

use super::{
    canonical_name, BinnedFeature, Binning, DatasetSketch, FeatureDescriptor, FeatureKind,
    PartitionSketch,
};
use crate::error::{Error, Result};

/// A single cell value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

/// One row; `None` marks a missing value.
pub type Record = Vec<Option<Value>>;

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub partition_size: usize,
    pub bins_per_numeric_feature: u32,
    /// Drop a trailing partition that has fewer than `partition_size` rows.
    pub drop_residue: bool,
    /// Columns to leave out of the sketch (e.g. the label column).
    pub exclude: Vec<String>,
    /// Declared value ranges keyed by canonical feature name. Numeric
    /// features with a declared range are binned over it instead of the
    /// observed `[min, max]`.
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            partition_size: 500,
            bins_per_numeric_feature: 32,
            drop_residue: false,
            exclude: Vec::new(),
            ranges: BTreeMap::new(),
        }
    }
}

/// Equal-width bins over `[min, max]` of the finite values.
///
/// A constant column yields a single bin centred on the value.
pub fn quantize_numeric(values: &[f64], bins: usize) -> Result<Binning> {
    if bins == 0 {
        return Err(Error::Ingest("bin count must be at least 1".into()));
    }
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(Error::Ingest("no finite values to quantize".into()));
    }
    Ok(equal_width(lo, hi, bins))
}

fn equal_width(lo: f64, hi: f64, bins: usize) -> Binning {
    if lo == hi {
        return Binning::Numeric { edges: vec![lo - 0.5, lo + 0.5] };
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    Binning::Numeric { edges }
}

/// Build the partitioned sketch of a table.
///
/// Partitions are consecutive row ranges in input order. Bin edges and
/// categorical vocabularies are computed over the whole table so every
/// partition shares them. Missing values are left out of the counts.
pub fn ingest_table(
    dataset_id: &str,
    rows: &[Record],
    schema: &[(String, FeatureKind)],
    opts: &IngestOptions,
) -> Result<DatasetSketch> {
    let m = opts.partition_size;
    if m == 0 {
        return Err(Error::Ingest("partition size must be at least 1".into()));
    }
    if opts.bins_per_numeric_feature == 0 {
        return Err(Error::Ingest("bins per numeric feature must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::Ingest("table has no rows".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != schema.len() {
            return Err(Error::Ingest(format!(
                "row {i} has {} values, schema has {} columns",
                r.len(),
                schema.len()
            )));
        }
    }

    let mut kept = rows.len();
    let residue = kept % m;
    if opts.drop_residue && residue > 0 {
        kept -= residue;
        if kept == 0 {
            return Err(Error::Ingest(format!(
                "dropping the residue leaves no partition ({} rows < partition size {m})",
                rows.len()
            )));
        }
    }
    let rows = &rows[..kept];

    let excluded: BTreeSet<String> = opts.exclude.iter().map(|s| canonical_name(s)).collect();
    let mut seen = BTreeSet::new();
    // (column index, descriptor, per-row bin)
    let mut columns: Vec<(FeatureDescriptor, Vec<Option<usize>>)> = Vec::new();
    for (col, (name, kind)) in schema.iter().enumerate() {
        let canon = canonical_name(name);
        if excluded.contains(&canon) {
            continue;
        }
        if !seen.insert(canon.clone()) {
            return Err(Error::Ingest(format!("duplicate column `{name}`")));
        }
        let column = match kind {
            FeatureKind::Numeric => {
                let values = numeric_column(rows, col, name)?;
                let binning = match opts.ranges.get(&canon) {
                    Some(&(lo, hi)) => {
                        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                            return Err(Error::Ingest(format!(
                                "declared range of `{name}` is invalid: [{lo}, {hi}]"
                            )));
                        }
                        equal_width(lo, hi, opts.bins_per_numeric_feature as usize)
                    }
                    None => {
                        let finite: Vec<f64> = values.iter().flatten().copied().collect();
                        quantize_numeric(&finite, opts.bins_per_numeric_feature as usize)
                            .map_err(|_| Error::Ingest(format!("column `{name}` has no finite values")))?
                    }
                };
                let bins = values.iter().map(|v| v.and_then(|x| binning.numeric_bin(x))).collect();
                (FeatureDescriptor::new(name, binning)?, bins)
            }
            FeatureKind::Categorical => {
                let tokens = categorical_column(rows, col);
                let categories: Vec<String> = tokens
                    .iter()
                    .flatten()
                    .cloned()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if categories.is_empty() {
                    return Err(Error::Ingest(format!("column `{name}` has no values")));
                }
                let binning = Binning::Categorical { categories };
                let bins = tokens
                    .iter()
                    .map(|t| t.as_deref().and_then(|t| binning.category_bin(t)))
                    .collect();
                (FeatureDescriptor::new(name, binning)?, bins)
            }
        };
        columns.push(column);
    }
    columns.sort_by_key(|(d, _)| d.feature_id);
    if columns.windows(2).any(|w| w[0].0.feature_id == w[1].0.feature_id) {
        return Err(Error::Ingest("two column names hash to the same feature id".into()));
    }

    let partitions = (0..rows.len().div_ceil(m))
        .map(|p| {
            let start = p * m;
            let end = (start + m).min(rows.len());
            let features = columns
                .iter()
                .map(|(d, bins)| {
                    let mut counts = vec![0u64; d.num_bins()];
                    for b in bins[start..end].iter().flatten() {
                        counts[*b] += 1;
                    }
                    BinnedFeature::from_counts(d.feature_id, counts)
                })
                .collect();
            PartitionSketch {
                partition_index: p,
                rows: (end - start) as u64,
                features,
            }
        })
        .collect();

    let sketch = DatasetSketch {
        dataset_id: dataset_id.to_string(),
        descriptors: columns.into_iter().map(|(d, _)| d).collect(),
        partitions,
        partition_size: m,
        total_rows: rows.len() as u64,
        bins_per_numeric_feature: opts.bins_per_numeric_feature,
    };
    debug_assert!(sketch.validate().is_ok());
    Ok(sketch)
}

fn numeric_column(rows: &[Record], col: usize, name: &str) -> Result<Vec<Option<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| match &r[col] {
            None => Ok(None),
            Some(Value::Number(x)) => Ok(x.is_finite().then_some(*x)),
            Some(Value::Text(s)) => {
                let s = s.trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(|x| x.is_finite().then_some(x))
                    .map_err(|_| Error::Ingest(format!("row {i}: `{s}` in numeric column `{name}` is not a number")))
            }
        })
        .collect()
}

fn categorical_column(rows: &[Record], col: usize) -> Vec<Option<String>> {
    rows.iter()
        .map(|r| match &r[col] {
            None => None,
            Some(Value::Number(x)) => Some(x.to_string()),
            Some(Value::Text(s)) => {
                let s = s.trim();
                (!s.is_empty()).then(|| s.to_string())
            }
        })
        .collect()
}
