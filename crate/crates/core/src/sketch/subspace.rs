use std::collections::HashMap;

use super::{DatasetSketch, FeatureId, PartitionSketch, ProbabilityVector};
use crate::error::{Error, Result};

/// A flattened sample space over a set of features, addressed by bin labels.
///
/// Built over one dataset it reproduces [`super::flatten`]. Built over two
/// datasets it covers the union of both sides' bins for every shared
/// feature, so categorical vocabularies that only partly overlap still land
/// in a common space.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    features: Vec<SubspaceFeature>,
    labels: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
struct SubspaceFeature {
    id: FeatureId,
    offset: usize,
    positions: HashMap<u64, usize>,
}

impl Subspace {
    fn build(sketches: &[&DatasetSketch], ids: &[FeatureId]) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Projection("empty feature subset".into()));
        }
        let mut features = Vec::with_capacity(ids.len());
        let mut labels = Vec::new();
        for id in ids {
            let offset = labels.len();
            let mut positions = HashMap::new();
            for s in sketches {
                let d = s.descriptor(id).ok_or_else(|| {
                    Error::Projection(format!("feature {id} not in dataset `{}`", s.dataset_id))
                })?;
                for bin in 0..d.num_bins() {
                    let label = d.bin_label(bin);
                    positions.entry(label).or_insert_with(|| {
                        labels.push(label);
                        labels.len() - 1
                    });
                }
            }
            features.push(SubspaceFeature { id, offset, positions });
        }
        Ok(Subspace { features, labels })
    }

    /// Space of `ids` within a single dataset.
    pub fn of(sketch: &DatasetSketch, ids: &[FeatureId]) -> Result<Self> {
        Self::build(&[sketch], ids)
    }

    /// Common space of `ids` across two datasets.
    pub fn shared(a: &DatasetSketch, b: &DatasetSketch, ids: &[FeatureId]) -> Result<Self> {
        Self::build(&[a, b], ids)
    }

    /// Common space of `ids` across any number of datasets.
    pub fn common(sketches: &[&DatasetSketch], ids: &[FeatureId]) -> Result<Self> {
        Self::build(sketches, ids)
    }

    pub fn dimension(&self) -> usize {
        self.labels.len()
    }

    /// Bin labels in coordinate order.
    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn feature_ids(&self) -> Vec<FeatureId> {
        self.features.iter().map(|f| f.id).collect()
    }

    /// Bin-to-coordinate map for one side.
    pub fn projector(&self, sketch: &DatasetSketch) -> Result<Projector> {
        let features = self
            .features
            .iter()
            .map(|f| {
                let d = sketch.descriptor(f.id).ok_or_else(|| {
                    Error::Projection(format!("feature {} not in dataset `{}`", f.id, sketch.dataset_id))
                })?;
                let coords = (0..d.num_bins())
                    .map(|bin| {
                        f.positions.get(&d.bin_label(bin)).copied().ok_or_else(|| {
                            Error::Projection(format!("bin {bin} of `{}` outside the subspace", d.name))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                debug_assert!(coords.iter().all(|&c| c >= f.offset));
                Ok((f.id, coords))
            })
            .collect::<Result<_>>()?;
        Ok(Projector { features, dimension: self.dimension() })
    }
}

/// Projects partitions of one dataset into a [`Subspace`].
#[derive(Clone, Debug)]
pub struct Projector {
    features: Vec<(FeatureId, Vec<usize>)>,
    dimension: usize,
}

impl Projector {
    pub fn counts(&self, partition: &PartitionSketch) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dimension];
        self.accumulate(partition, &mut out)?;
        Ok(out)
    }

    fn accumulate(&self, partition: &PartitionSketch, out: &mut [f64]) -> Result<()> {
        for (id, coords) in &self.features {
            let f = partition.feature(*id).ok_or_else(|| {
                Error::Projection(format!(
                    "feature {id} not present in partition {}",
                    partition.partition_index
                ))
            })?;
            for (&c, &n) in coords.iter().zip(&f.counts) {
                out[c] += n as f64;
            }
        }
        Ok(())
    }

    pub fn distribution(&self, partition: &PartitionSketch) -> Result<ProbabilityVector> {
        ProbabilityVector::from_counts(&self.counts(partition)?).map_err(|e| match e {
            Error::EmptyDistribution(_) => Error::EmptyDistribution(format!(
                "partition {} has no mass on the projected features",
                partition.partition_index
            )),
            other => other,
        })
    }

    /// Distribution of every partition, in partition order.
    pub fn partitions(&self, sketch: &DatasetSketch) -> Result<Vec<ProbabilityVector>> {
        sketch.partitions.iter().map(|p| self.distribution(p)).collect()
    }

    /// Distribution of the whole dataset (all partitions merged).
    pub fn whole(&self, sketch: &DatasetSketch) -> Result<ProbabilityVector> {
        let mut out = vec![0.0; self.dimension];
        for p in &sketch.partitions {
            self.accumulate(p, &mut out)?;
        }
        ProbabilityVector::from_counts(&out)
    }

    /// Row-weighted mean of the partition distributions.
    pub fn center(&self, sketch: &DatasetSketch) -> Result<Vec<f64>> {
        let mut center = vec![0.0; self.dimension];
        let mut weight = 0.0;
        for p in &sketch.partitions {
            let v = self.distribution(p)?;
            let w = p.rows as f64;
            for (c, x) in center.iter_mut().zip(v.entries()) {
                *c += w * x;
            }
            weight += w;
        }
        if weight <= 0.0 {
            return Err(Error::EmptyDistribution(format!("dataset `{}` has no rows", sketch.dataset_id)));
        }
        center.iter_mut().for_each(|c| *c /= weight);
        Ok(center)
    }
}
