#![allow(dead_code)]

use fitsearch_core::sketch::{BinnedFeature, Binning, DatasetSketch, FeatureDescriptor, PartitionSketch};

/// Sketch with one categorical feature per entry of `names`; every partition
/// repeats `counts` for every feature.
pub fn cat_sketch(id: &str, names: &[&str], parts: &[Vec<u64>]) -> DatasetSketch {
    let k = parts[0].len();
    let cats: Vec<String> = (0..k).map(|i| format!("c{i:02}")).collect();
    let mut descriptors: Vec<_> = names
        .iter()
        .map(|n| FeatureDescriptor::new(n, Binning::Categorical { categories: cats.clone() }).unwrap())
        .collect();
    descriptors.sort_by_key(|d| d.feature_id);
    let partitions: Vec<_> = parts
        .iter()
        .enumerate()
        .map(|(i, c)| PartitionSketch {
            partition_index: i,
            rows: c.iter().sum(),
            features: descriptors
                .iter()
                .map(|d| BinnedFeature::from_counts(d.feature_id, c.clone()))
                .collect(),
        })
        .collect();
    let total_rows = partitions.iter().map(|p| p.rows).sum();
    DatasetSketch {
        dataset_id: id.into(),
        descriptors,
        partition_size: partitions[0].rows as usize,
        partitions,
        total_rows,
        bins_per_numeric_feature: 32,
    }
}

/// Integer counts approximating `p` with `n` rows.
pub fn counts(p: &[f64], n: u64) -> Vec<u64> {
    p.iter().map(|x| (x * n as f64).round() as u64).collect()
}

pub fn mix(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

/// Mixing weight `w` with `JS(a, mix(a, b, w))` equal to `target`.
pub fn weight_for_js(a: &[f64], b: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if fitsearch_core::metrics::js_slices(a, &mix(a, b, mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
