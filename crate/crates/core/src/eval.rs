//! Evaluation harness: correlation and top-k error of search metrics against
//! target accuracies, and a synthetic workload generator with a declared
//! accuracy proxy.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive;
use crate::metrics::js_slices;
use crate::registry::Registry;
use crate::search::{js_scores, overlap_search, search, Metric, SearchConfig};
use crate::sketch::{ingest_table, DatasetSketch, FeatureKind, IngestOptions, SchemaEntry, Value};

// ---------------------------------------------------------------------------
// Statistics

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two observations".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale = mx.abs().max(my.abs()).max(1.0);
    if sxx <= 1e-24 * scale * scale * n || syy <= 1e-24 * scale * scale * n {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties get the average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&ranks(xs), &ranks(ys))
}

// ---------------------------------------------------------------------------
// Accuracy tables

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub source_model_id: String,
    pub target_dataset_id: String,
    pub target_accuracy: f64,
}

/// Ground-truth accuracy of source models on target datasets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    rows: BTreeMap<(String, String), f64>,
    source_accuracy: BTreeMap<String, f64>,
}

fn check_accuracy(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Data(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

impl AccuracyTable {
    pub fn new(rows: impl IntoIterator<Item = AccuracyRow>) -> Result<Self> {
        let mut t = AccuracyTable::default();
        for r in rows {
            t.insert(r)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, row: AccuracyRow) -> Result<()> {
        check_accuracy(row.target_accuracy, "target accuracy")?;
        let key = (row.source_model_id, row.target_dataset_id);
        if self.rows.contains_key(&key) {
            return Err(Error::Data(format!("duplicate accuracy row ({}, {})", key.0, key.1)));
        }
        self.rows.insert(key, row.target_accuracy);
        Ok(())
    }

    pub fn set_source_accuracy(&mut self, model_id: &str, accuracy: f64) -> Result<()> {
        check_accuracy(accuracy, "source accuracy")?;
        self.source_accuracy.insert(model_id.to_string(), accuracy);
        Ok(())
    }

    pub fn source_accuracy(&self, model_id: &str) -> Option<f64> {
        self.source_accuracy.get(model_id).copied()
    }

    pub fn get(&self, source_model_id: &str, target_dataset_id: &str) -> Option<f64> {
        self.rows
            .get(&(source_model_id.to_string(), target_dataset_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = AccuracyRow> + '_ {
        self.rows.iter().map(|((s, t), &a)| AccuracyRow {
            source_model_id: s.clone(),
            target_dataset_id: t.clone(),
            target_accuracy: a,
        })
    }

    /// `(model, accuracy)` rows of one target.
    pub fn for_target(&self, target_dataset_id: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|((_, t), _)| t == target_dataset_id)
            .map(|((s, _), &a)| (s.clone(), a))
            .collect()
    }

    /// Copy without rows whose source model is in `models`.
    pub fn without_models(&self, models: &BTreeSet<String>) -> AccuracyTable {
        AccuracyTable {
            rows: self
                .rows
                .iter()
                .filter(|((s, _), _)| !models.contains(s))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            source_accuracy: self.source_accuracy.clone(),
        }
    }

    /// Read `source_model_id,target_dataset_id,target_accuracy[,source_accuracy]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (s, t, a) = match (col("source_model_id"), col("target_dataset_id"), col("target_accuracy")) {
            (Some(s), Some(t), Some(a)) => (s, t, a),
            _ => {
                return Err(Error::Data(
                    "accuracy table needs source_model_id, target_dataset_id, target_accuracy columns".into(),
                ))
            }
        };
        let src_acc = col("source_accuracy");
        let mut table = AccuracyTable::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let line = i + 2;
            let num = |idx: usize| -> Result<f64> {
                rec.get(idx)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::Data(format!("line {line}: invalid number `{}`", rec.get(idx).unwrap_or(""))))
            };
            let model = rec.get(s).unwrap_or("").to_string();
            table.insert(AccuracyRow {
                source_model_id: model.clone(),
                target_dataset_id: rec.get(t).unwrap_or("").to_string(),
                target_accuracy: num(a)?,
            })?;
            if let Some(c) = src_acc {
                if !rec.get(c).unwrap_or("").is_empty() {
                    table.set_source_accuracy(&model, num(c)?)?;
                }
            }
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["source_model_id", "target_dataset_id", "target_accuracy", "source_accuracy"])
            .map_err(csv_err)?;
        for r in self.rows() {
            let src = self.source_accuracy(&r.source_model_id).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.source_model_id, r.target_dataset_id, r.target_accuracy.to_string(), src])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Whether `chosen` is among the true top-k models of `target`. Ties with the
/// k-th best accuracy count as correct.
pub fn in_true_top_k(chosen: &str, target: &str, truth: &AccuracyTable, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let acc = truth
        .get(chosen, target)
        .ok_or_else(|| Error::Data(format!("no accuracy for model `{chosen}` on `{target}`")))?;
    let mut all: Vec<f64> = truth.for_target(target).into_iter().map(|(_, a)| a).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    let kth = all[(k - 1).min(all.len() - 1)];
    Ok(acc >= kth)
}

/// Fraction of queries whose first-ranked model is not in the true top-k.
/// `rankings` holds `(target_dataset_id, ranked model ids)`; an empty ranking
/// counts as an error.
pub fn topk_error(rankings: &[(String, Vec<String>)], truth: &AccuracyTable, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::DegenerateInput("no queries".into()));
    }
    let mut wrong = 0usize;
    for (target, ranked) in rankings {
        let ok = match ranked.first() {
            Some(m) => in_true_top_k(m, target, truth, k)?,
            None => false,
        };
        wrong += usize::from(!ok);
    }
    Ok(wrong as f64 / rankings.len() as f64)
}

// ---------------------------------------------------------------------------
// Synthetic workloads

/// Parameters of a synthetic workload.
///
/// Every feature is numeric over `[0, 1)` with `bins` equal-width cells.
/// Per feature, family `f` draws rows from `(1 - shift_f) * C + shift_f * G_f`
/// where `C` is shared by all families and `G_f` is family specific, both
/// Dirichlet(`concentration`) draws over the cells. Each dataset may add its
/// own perturbation of weight `jitter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorkloadSpec {
    pub num_families: usize,
    pub datasets_per_family: usize,
    pub rows_per_dataset: usize,
    pub num_features: usize,
    pub shift: f64,
    /// Overrides `shift` per family when non-empty.
    pub family_shifts: Vec<f64>,
    pub jitter: f64,
    pub concentration: f64,
    pub bins: usize,
    pub partition_size: usize,
    pub seed: u64,
}

impl Default for SyntheticWorkloadSpec {
    fn default() -> Self {
        SyntheticWorkloadSpec {
            num_families: 6,
            datasets_per_family: 3,
            rows_per_dataset: 2000,
            num_features: 4,
            shift: 0.8,
            family_shifts: Vec::new(),
            jitter: 0.0,
            concentration: 0.5,
            bins: 16,
            partition_size: 500,
            seed: 7,
        }
    }
}

impl SyntheticWorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_families", self.num_families),
            ("datasets_per_family", self.datasets_per_family),
            ("rows_per_dataset", self.rows_per_dataset),
            ("num_features", self.num_features),
            ("bins", self.bins),
            ("partition_size", self.partition_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if !self.family_shifts.is_empty() && self.family_shifts.len() != self.num_families {
            return Err(Error::Invalid("family_shifts needs one entry per family".into()));
        }
        for s in self.family_shifts.iter().chain([&self.shift]) {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::Invalid(format!("shift {s} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Invalid(format!("jitter {} outside [0, 1]", self.jitter)));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Invalid("concentration must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("workload spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("workload spec serializes")
    }

    fn family_shift(&self, f: usize) -> f64 {
        self.family_shifts.get(f).copied().unwrap_or(self.shift)
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.num_features).map(|i| format!("x{i}")).collect()
    }

    pub fn schema(&self) -> Vec<SchemaEntry> {
        self.feature_names()
            .into_iter()
            .map(|name| SchemaEntry { name, kind: FeatureKind::Numeric, range: Some((0.0, 1.0)) })
            .collect()
    }

    pub fn ingest_options(&self) -> IngestOptions {
        let mut opts = IngestOptions {
            partition_size: self.partition_size,
            bins_per_numeric_feature: self.bins as u32,
            ..Default::default()
        };
        for name in self.feature_names() {
            opts.ranges.insert(name, (0.0, 1.0));
        }
        opts
    }
}

/// Model id attached to the model trained on `dataset_id`.
pub fn model_id_for(dataset_id: &str) -> String {
    format!("model-{dataset_id}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub dataset_id: String,
    pub family: usize,
    /// Row-major feature values in `[0, 1)`.
    pub rows: Vec<Vec<f64>>,
    /// Generating cell probabilities, one vector per feature.
    pub generating: Vec<Vec<f64>>,
}

impl GeneratedDataset {
    /// Generating distribution flattened like a sketch partition.
    pub fn flat_generating(&self) -> Vec<f64> {
        let f = self.generating.len() as f64;
        self.generating.iter().flatten().map(|p| p / f).collect()
    }

    pub fn sketch(&self, spec: &SyntheticWorkloadSpec) -> Result<DatasetSketch> {
        let records: Vec<_> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&v| Some(Value::Number(v))).collect())
            .collect();
        let schema: Vec<_> = spec.feature_names().into_iter().map(|n| (n, FeatureKind::Numeric)).collect();
        ingest_table(&self.dataset_id, &records, &schema, &spec.ingest_options())
    }

    pub fn write_csv<W: Write>(&self, names: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(names).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:.6}"))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const TRUTH_PROXY_DESCRIPTION: &str =
    "target_accuracy = 1 - JS(generating_source, generating_target) / ln 2 (nats, flattened over features)";

#[derive(Clone, Debug)]
pub struct Workload {
    pub spec: SyntheticWorkloadSpec,
    pub datasets: Vec<GeneratedDataset>,
    pub truth: AccuracyTable,
    pub truth_proxy: &'static str,
}

impl Workload {
    pub fn sketches(&self) -> Result<Vec<DatasetSketch>> {
        self.datasets.iter().map(|d| d.sketch(&self.spec)).collect()
    }
}

fn dirichlet(rng: &mut impl Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let v: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

fn mix(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

pub fn generate_workload(spec: &SyntheticWorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let (k, nf) = (spec.bins, spec.num_features);
    let mut base = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[0]));
    let common: Vec<Vec<f64>> = (0..nf).map(|_| dirichlet(&mut base, k, spec.concentration)).collect();

    let mut datasets = Vec::with_capacity(spec.num_families * spec.datasets_per_family);
    for f in 0..spec.num_families {
        let mut frng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[1, f as u64]));
        let family: Vec<Vec<f64>> = common
            .iter()
            .map(|c| mix(c, &dirichlet(&mut frng, k, spec.concentration), spec.family_shift(f)))
            .collect();
        for d in 0..spec.datasets_per_family {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[2, f as u64, d as u64]));
            let generating: Vec<Vec<f64>> = family
                .iter()
                .map(|p| {
                    if spec.jitter > 0.0 {
                        mix(p, &dirichlet(&mut rng, k, spec.concentration), spec.jitter)
                    } else {
                        p.clone()
                    }
                })
                .collect();
            let samplers: Vec<_> = generating
                .iter()
                .map(|p| WeightedIndex::new(p).map_err(|e| Error::Invalid(e.to_string())))
                .collect::<Result<_>>()?;
            let rows = (0..spec.rows_per_dataset)
                .map(|_| {
                    samplers
                        .iter()
                        .map(|s| (s.sample(&mut rng) as f64 + rng.random::<f64>()) / k as f64)
                        .map(|v| v.min(1.0 - 1e-12))
                        .collect()
                })
                .collect();
            datasets.push(GeneratedDataset {
                dataset_id: format!("fam{f:03}-ds{d:03}"),
                family: f,
                rows,
                generating,
            });
        }
    }

    let flat: Vec<Vec<f64>> = datasets.iter().map(GeneratedDataset::flat_generating).collect();
    let mut truth = AccuracyTable::default();
    for (i, s) in datasets.iter().enumerate() {
        for (j, t) in datasets.iter().enumerate() {
            if i == j {
                continue;
            }
            let acc = (1.0 - js_slices(&flat[i], &flat[j]) / std::f64::consts::LN_2).clamp(0.0, 1.0);
            truth.insert(AccuracyRow {
                source_model_id: model_id_for(&s.dataset_id),
                target_dataset_id: t.dataset_id.clone(),
                target_accuracy: acc,
            })?;
        }
    }
    Ok(Workload { spec: spec.clone(), datasets, truth, truth_proxy: TRUTH_PROXY_DESCRIPTION })
}

/// Limits of [`random_sketch_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomPairSpec {
    pub max_features: usize,
    pub max_bins: usize,
    pub max_partitions: usize,
    /// Forces both sides to exactly this many partitions.
    pub partitions: Option<usize>,
    pub min_rows: usize,
    pub max_rows: usize,
    pub max_modes: usize,
    pub concentration: f64,
}

impl Default for RandomPairSpec {
    fn default() -> Self {
        RandomPairSpec {
            max_features: 8,
            max_bins: 16,
            max_partitions: 10,
            partitions: None,
            min_rows: 200,
            max_rows: 600,
            max_modes: 3,
            concentration: 0.5,
        }
    }
}

/// Two sketches over the same numeric features whose partitions are drawn
/// from a shared pool of modes, so that both close and distant partition
/// pairs occur.
pub fn random_sketch_pair(spec: &RandomPairSpec, seed: u64) -> (DatasetSketch, DatasetSketch) {
    use crate::sketch::{BinnedFeature, Binning, FeatureDescriptor, PartitionSketch};

    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x5041_4952]));
    let nf = rng.random_range(1..=spec.max_features.max(1));
    let bins: Vec<usize> = (0..nf).map(|_| rng.random_range(2..=spec.max_bins.max(2))).collect();
    let mut descriptors: Vec<FeatureDescriptor> = bins
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let edges = (0..=b).map(|k| k as f64 / b as f64).collect();
            FeatureDescriptor::new(&format!("f{i}"), Binning::Numeric { edges }).expect("valid edges")
        })
        .collect();
    descriptors.sort_by_key(|d| d.feature_id);
    let modes: Vec<Vec<Vec<f64>>> = (0..rng.random_range(1..=spec.max_modes.max(1)))
        .map(|_| {
            descriptors
                .iter()
                .map(|d| dirichlet(&mut rng, d.num_bins(), spec.concentration))
                .collect()
        })
        .collect();
    let m = rng.random_range(spec.min_rows.max(1)..=spec.max_rows.max(spec.min_rows.max(1)));
    let mut side = |id: &str| {
        let n = spec.partitions.unwrap_or_else(|| rng.random_range(1..=spec.max_partitions.max(1)));
        let partitions = (0..n)
            .map(|i| {
                let mode = &modes[rng.random_range(0..modes.len())];
                let features = descriptors
                    .iter()
                    .zip(mode)
                    .map(|(d, p)| {
                        let w = WeightedIndex::new(p).expect("valid weights");
                        let mut counts = vec![0u64; p.len()];
                        for _ in 0..m {
                            counts[w.sample(&mut rng)] += 1;
                        }
                        BinnedFeature::from_counts(d.feature_id, counts)
                    })
                    .collect();
                PartitionSketch { partition_index: i, rows: m as u64, features }
            })
            .collect();
        DatasetSketch {
            dataset_id: id.to_string(),
            descriptors: descriptors.clone(),
            partitions,
            partition_size: m,
            total_rows: (m * n) as u64,
            bins_per_numeric_feature: 32,
        }
    };
    let a = side("pair-source");
    let b = side("pair-target");
    (a, b)
}

// ---------------------------------------------------------------------------
// Metric comparison

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Adaptivity,
    Js,
    L2Center,
    SourceAccuracy,
}

impl EvalMetric {
    pub const ALL: [EvalMetric; 4] =
        [EvalMetric::Adaptivity, EvalMetric::Js, EvalMetric::L2Center, EvalMetric::SourceAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Adaptivity => "adaptivity",
            EvalMetric::Js => "js",
            EvalMetric::L2Center => "l2_center",
            EvalMetric::SourceAccuracy => "source_accuracy",
        }
    }
}

/// One `(query, metric)` line of the report. `value`s keep the metric's
/// natural sign, so divergences and distances correlate negatively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub query_dataset_id: String,
    pub metric: EvalMetric,
    pub pearson: Option<f64>,
    pub scored_models: usize,
    pub chosen_model: Option<String>,
    pub top1_correct: bool,
    pub top2_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: EvalMetric,
    pub mean_pearson: Option<f64>,
    pub top1_error: f64,
    pub top2_error: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

impl MetricsReport {
    pub fn summary_for(&self, metric: EvalMetric) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.metric == metric)
    }

    pub fn write_rows_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "query_dataset_id",
            "metric",
            "pearson",
            "scored_models",
            "chosen_model",
            "top1_correct",
            "top2_correct",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.query_dataset_id.clone(),
                r.metric.name().to_string(),
                fmt_opt(r.pearson),
                r.scored_models.to_string(),
                r.chosen_model.clone().unwrap_or_default(),
                r.top1_correct.to_string(),
                r.top2_correct.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "mean_pearson", "top1_error", "top2_error", "queries"])
            .map_err(csv_err)?;
        for s in &self.summary {
            w.write_record([
                s.metric.name().to_string(),
                fmt_opt(s.mean_pearson),
                format!("{:.6}", s.top1_error),
                format!("{:.6}", s.top2_error),
                s.queries.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub search: SearchConfig,
    pub metrics: Vec<EvalMetric>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { search: SearchConfig::default(), metrics: EvalMetric::ALL.to_vec() }
    }
}

/// Models ranked by one metric for one query, with their natural values.
fn scored_models(
    registry: &Registry,
    query: &DatasetSketch,
    metric: EvalMetric,
    base: &SearchConfig,
    truth: &AccuracyTable,
) -> Result<Vec<(String, f64)>> {
    let run = |metric: Metric, sign: f64, t_js: f64| -> Result<Vec<(String, f64)>> {
        let cfg = SearchConfig { metric, t_adaptivity: 0.0, t_js, top: None, ..*base };
        let results = match metric {
            // every candidate needs a score for the correlation, so no JS cut
            Metric::Js => js_scores(query, &overlap_search(query, registry, &cfg)?, registry, &cfg)?,
            _ => search(query, registry, &cfg)?,
        };
        Ok(results
            .into_iter()
            .map(|r| {
                let v = sign * r.ranking_key();
                (r.model_id, v)
            })
            .collect())
    };
    let mut out = match metric {
        EvalMetric::Adaptivity => run(Metric::Adaptivity, 1.0, base.t_js)?,
        EvalMetric::Js => run(Metric::Js, -1.0, base.t_js)?,
        EvalMetric::L2Center => run(Metric::L2Center, -1.0, base.t_js)?,
        EvalMetric::SourceAccuracy => {
            let mut v: Vec<(String, f64)> = registry
                .models()
                .filter_map(|m| {
                    m.record
                        .source_accuracy
                        .or_else(|| truth.source_accuracy(&m.record.model_id))
                        .map(|a| (m.record.model_id.clone(), a))
                })
                .collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v
        }
    };
    // the model trained on the query dataset itself is not a candidate
    out.retain(|(id, _)| registry.get(id).map(|m| m.record.dataset_id != query.dataset_id).unwrap_or(false));
    Ok(out)
}

/// Score every query with every metric against `truth`.
pub fn compare_metrics(
    registry: &Registry,
    queries: &[DatasetSketch],
    truth: &AccuracyTable,
    config: &CompareConfig,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for q in queries {
        let own: BTreeSet<String> = registry
            .models()
            .filter(|m| m.record.dataset_id == q.dataset_id)
            .map(|m| m.record.model_id.clone())
            .collect();
        let eligible = truth.without_models(&own);
        if eligible.for_target(&q.dataset_id).is_empty() {
            return Err(Error::Data(format!("no accuracy rows for query `{}`", q.dataset_id)));
        }
        for &metric in &config.metrics {
            let scored = scored_models(registry, q, metric, &config.search, truth)?;
            let mut xs = Vec::with_capacity(scored.len());
            let mut ys = Vec::with_capacity(scored.len());
            for (id, v) in &scored {
                let acc = eligible
                    .get(id, &q.dataset_id)
                    .ok_or_else(|| Error::Data(format!("no accuracy for model `{id}` on `{}`", q.dataset_id)))?;
                xs.push(*v);
                ys.push(acc);
            }
            let pearson = match pearson(&xs, &ys) {
                Ok(r) => Some(r),
                Err(Error::DegenerateInput(_)) => None,
                Err(e) => return Err(e),
            };
            let chosen = scored.first().map(|(id, _)| id.clone());
            let correct = |k| match &chosen {
                Some(m) => in_true_top_k(m, &q.dataset_id, &eligible, k),
                None => Ok(false),
            };
            rows.push(ReportRow {
                query_dataset_id: q.dataset_id.clone(),
                metric,
                pearson,
                scored_models: scored.len(),
                chosen_model: chosen.clone(),
                top1_correct: correct(1)?,
                top2_correct: correct(2)?,
            });
        }
    }
    let summary = config
        .metrics
        .iter()
        .map(|&metric| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == metric).collect();
            let ps: Vec<f64> = mine.iter().filter_map(|r| r.pearson).collect();
            let n = mine.len().max(1) as f64;
            SummaryRow {
                metric,
                mean_pearson: (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64),
                top1_error: mine.iter().filter(|r| !r.top1_correct).count() as f64 / n,
                top2_error: mine.iter().filter(|r| !r.top2_correct).count() as f64 / n,
                queries: mine.len(),
            }
        })
        .collect();
    Ok(MetricsReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!(close(pearson(&xs, &ys).unwrap(), 1.0, 1e-12));
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!(close(pearson(&xs, &neg).unwrap(), -1.0, 1e-12));
        assert!(close(pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, 1e-12));
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!(close(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap(), 1.0, 1e-12));
    }

    fn truth3() -> AccuracyTable {
        AccuracyTable::new(["a", "b", "c"].iter().zip([0.9, 0.5, 0.1]).map(|(m, a)| AccuracyRow {
            source_model_id: m.to_string(),
            target_dataset_id: "t".into(),
            target_accuracy: a,
        }))
        .unwrap()
    }

    #[test]
    fn topk_examples() {
        let t = truth3();
        let best = vec![("t".to_string(), vec!["a".to_string()])];
        let worst = vec![("t".to_string(), vec!["c".to_string(), "a".to_string()])];
        assert_eq!(topk_error(&best, &t, 1).unwrap(), 0.0);
        assert_eq!(topk_error(&worst, &t, 1).unwrap(), 1.0);
        let second = vec![("t".to_string(), vec!["b".to_string()])];
        assert_eq!(topk_error(&second, &t, 1).unwrap(), 1.0);
        assert_eq!(topk_error(&second, &t, 2).unwrap(), 0.0);
        let missing = vec![("t".to_string(), vec!["zz".to_string()])];
        assert!(matches!(topk_error(&missing, &t, 1), Err(Error::Data(_))));
    }

    #[test]
    fn topk_ratio_of_thirteen() {
        let mut rows = Vec::new();
        let mut rankings = Vec::new();
        for q in 0..13 {
            let target = format!("q{q}");
            for (m, a) in [("good", 0.9), ("bad", 0.2)] {
                rows.push(AccuracyRow { source_model_id: m.into(), target_dataset_id: target.clone(), target_accuracy: a });
            }
            let pick = if q < 3 { "bad" } else { "good" };
            rankings.push((target, vec![pick.to_string()]));
        }
        let t = AccuracyTable::new(rows).unwrap();
        assert!(close(topk_error(&rankings, &t, 1).unwrap(), 0.2308, 1e-4));
    }

    #[test]
    fn ties_count_as_correct() {
        let t = AccuracyTable::new(["a", "b"].iter().map(|m| AccuracyRow {
            source_model_id: m.to_string(),
            target_dataset_id: "t".into(),
            target_accuracy: 0.7,
        }))
        .unwrap();
        assert_eq!(topk_error(&[("t".into(), vec!["b".into()])], &t, 1).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_table_csv_round_trip() {
        let mut t = truth3();
        t.set_source_accuracy("a", 0.8).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(AccuracyTable::read_csv(buf.as_slice()).unwrap(), t);
        let dup = "source_model_id,target_dataset_id,target_accuracy\na,t,0.5\na,t,0.6\n";
        assert!(AccuracyTable::read_csv(dup.as_bytes()).is_err());
        let range = "source_model_id,target_dataset_id,target_accuracy\na,t,1.5\n";
        assert!(AccuracyTable::read_csv(range.as_bytes()).is_err());
    }

    #[test]
    fn workload_spec_toml() {
        let spec = SyntheticWorkloadSpec::from_toml_str("num_families = 2\nshift = 0.3\nseed = 11\n").unwrap();
        assert_eq!(spec.num_families, 2);
        assert_eq!(spec.seed, 11);
        assert_eq!(SyntheticWorkloadSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        assert!(SyntheticWorkloadSpec::from_toml_str("num_families = 0").is_err());
        assert!(SyntheticWorkloadSpec::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn workload_shape_and_determinism() {
        let spec = SyntheticWorkloadSpec { num_families: 2, datasets_per_family: 2, rows_per_dataset: 300, ..Default::default() };
        let a = generate_workload(&spec).unwrap();
        let b = generate_workload(&spec).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.datasets.len(), 4);
        assert_eq!(a.truth.len(), 12);
        let s = a.datasets[0].sketch(&spec).unwrap();
        assert_eq!(s.total_rows, 300);
        assert_eq!(s.descriptors.len(), spec.num_features);
    }
}
