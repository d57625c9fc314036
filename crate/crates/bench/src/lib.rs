//! Hyperparameter sweeps, speedup and latency measurements over synthetic
//! workloads.
//!
//! Timings run on a one-thread rayon pool so the LSH and brute-force paths
//! are compared on equal footing.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use fitsearch_core::eval::{generate_workload, model_id_for};
use fitsearch_core::search::{adaptivity_search, exact_neighbor_pairs, js_search, overlap_search, JsNeighborIndex};
use fitsearch_core::{
    DatasetSketch, Error, ExactRescoring, JsLshParams, Metric, ModelRecord, Registry, RegistryParams, Result,
    SearchConfig, SyntheticWorkloadSpec,
};
use serde::Serialize;

pub const BENCH_FORMAT: &str = "fitsearch-bench";
pub const BENCH_FORMAT_VERSION: u32 = 1;

/// 54 families of 3 datasets: 162 tables.
pub fn table_workload() -> SyntheticWorkloadSpec {
    SyntheticWorkloadSpec { num_families: 54, datasets_per_family: 3, ..Default::default() }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    R,
    K,
    L,
    Bins,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "r" => Ok(SweepParam::R),
            "K" | "k" => Ok(SweepParam::K),
            "L" | "l" => Ok(SweepParam::L),
            "bins" => Ok(SweepParam::Bins),
            other => Err(Error::Invalid(format!("sweep must be r, K, L or bins, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::R => "r",
            SweepParam::K => "K",
            SweepParam::L => "L",
            SweepParam::Bins => "bins",
        })
    }
}

impl SweepParam {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::R => vec![0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0],
            SweepParam::K => vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0],
            SweepParam::L => vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            SweepParam::Bins => vec![4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub tables: usize,
    pub exact_pairs: usize,
    pub lsh_pairs: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub index_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairQuality {
    pub exact_pairs: usize,
    pub lsh_pairs: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
}

impl PairQuality {
    pub fn of(lsh: &BTreeSet<(usize, usize)>, exact: &BTreeSet<(usize, usize)>) -> Self {
        let tp = lsh.intersection(exact).count();
        let ratio = |n: usize| if n == 0 { 1.0 } else { tp as f64 / n as f64 };
        PairQuality {
            exact_pairs: exact.len(),
            lsh_pairs: lsh.len(),
            true_positives: tp,
            precision: ratio(lsh.len()),
            recall: ratio(exact.len()),
        }
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

fn workload_sketches(spec: &SyntheticWorkloadSpec) -> Result<Vec<DatasetSketch>> {
    generate_workload(spec)?.sketches()
}

fn lsh_pairs(sketches: &[&DatasetSketch], params: &JsLshParams, t_js: f64) -> Result<BTreeSet<(usize, usize)>> {
    let features = sketches[0].feature_ids();
    Ok(JsNeighborIndex::build(sketches, &features, params, t_js)?.neighbor_pairs())
}

/// Precision and recall of JS-LSH neighbour pairs against exact JS pairs
/// for each value of one parameter.
pub fn sweep(
    spec: &SyntheticWorkloadSpec,
    param: SweepParam,
    values: &[f64],
    base: &JsLshParams,
    t_js: f64,
) -> Result<Vec<SweepPoint>> {
    let fixed = if param == SweepParam::Bins { None } else { Some(workload_sketches(spec)?) };
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut params = *base;
        let owned;
        let sketches = match param {
            SweepParam::R => {
                params.r = value;
                fixed.as_ref().unwrap()
            }
            SweepParam::K => {
                params.k_per_band = value as usize;
                fixed.as_ref().unwrap()
            }
            SweepParam::L => {
                params.num_bands = value as usize;
                fixed.as_ref().unwrap()
            }
            SweepParam::Bins => {
                owned = workload_sketches(&SyntheticWorkloadSpec { bins: value as usize, ..spec.clone() })?;
                &owned
            }
        };
        params.validate()?;
        let refs: Vec<&DatasetSketch> = sketches.iter().collect();
        let features = refs[0].feature_ids();
        let exact = exact_neighbor_pairs(&refs, &features, t_js)?;
        let start = Instant::now();
        let lsh = lsh_pairs(&refs, &params, t_js)?;
        let index_secs = start.elapsed().as_secs_f64();
        let q = PairQuality::of(&lsh, &exact);
        out.push(SweepPoint {
            param,
            value,
            tables: refs.len(),
            exact_pairs: q.exact_pairs,
            lsh_pairs: q.lsh_pairs,
            true_positives: q.true_positives,
            precision: q.precision,
            recall: q.recall,
            index_secs,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub tables: usize,
    pub repeats: usize,
    /// Median wall clock of all-pairs exact JS.
    pub exact_secs: f64,
    /// Median wall clock of building the JS-LSH index and reading its pairs.
    pub lsh_secs: f64,
    pub speedup: f64,
    pub quality: PairQuality,
}

/// Whole-table JS neighbour search over every table of the workload, LSH
/// against brute force. Both sides include projecting the sketches.
pub fn speedup(spec: &SyntheticWorkloadSpec, params: &JsLshParams, t_js: f64, repeats: usize) -> Result<SpeedupReport> {
    let sketches = workload_sketches(spec)?;
    let refs: Vec<&DatasetSketch> = sketches.iter().collect();
    let features = refs[0].feature_ids();
    let repeats = repeats.max(1);
    single_thread(|| {
        let (mut exact_t, mut lsh_t) = (Vec::new(), Vec::new());
        let (mut exact, mut lsh) = (BTreeSet::new(), BTreeSet::new());
        for _ in 0..repeats {
            let start = Instant::now();
            exact = exact_neighbor_pairs(&refs, &features, t_js)?;
            exact_t.push(start.elapsed());
            let start = Instant::now();
            lsh = lsh_pairs(&refs, params, t_js)?;
            lsh_t.push(start.elapsed());
        }
        let exact_secs = median(exact_t).as_secs_f64();
        let lsh_secs = median(lsh_t).as_secs_f64();
        Ok(SpeedupReport {
            tables: refs.len(),
            repeats,
            exact_secs,
            lsh_secs,
            speedup: exact_secs / lsh_secs.max(1e-12),
            quality: PairQuality::of(&lsh, &exact),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub partition_size: usize,
    pub models: usize,
    pub queries: usize,
    pub repeats: usize,
    /// Median total over all queries.
    pub adaptivity_secs: f64,
    pub js_secs: f64,
    pub overhead: f64,
}

/// Stage-two latency of adaptivity against whole-dataset JS on the same
/// overlap candidates, LSH path only.
pub fn latency_profile(spec: &SyntheticWorkloadSpec, params: &RegistryParams, repeats: usize) -> Result<LatencyReport> {
    let workload = generate_workload(spec)?;
    let sketches = workload.sketches()?;
    let mut registry = Registry::new(*params)?;
    let mut queries = Vec::new();
    for (d, s) in workload.datasets.iter().zip(sketches) {
        if d.dataset_id.ends_with("ds000") || spec.datasets_per_family == 1 {
            registry.register(ModelRecord::new(model_id_for(&d.dataset_id), d.dataset_id.clone()), s.clone())?;
        }
        if !d.dataset_id.ends_with("ds000") || spec.datasets_per_family == 1 {
            queries.push(s);
        }
    }
    let base = SearchConfig { exact_rescoring: ExactRescoring::Off, ..Default::default() };
    let js_cfg = SearchConfig { metric: Metric::Js, ..base };
    let candidates = queries
        .iter()
        .map(|q| overlap_search(q, &registry, &base))
        .collect::<Result<Vec<_>>>()?;
    let repeats = repeats.max(1);
    single_thread(|| {
        let (mut adapt_t, mut js_t) = (Vec::new(), Vec::new());
        for _ in 0..repeats {
            let start = Instant::now();
            for (q, c) in queries.iter().zip(&candidates) {
                adaptivity_search(q, c, &registry, &base)?;
            }
            adapt_t.push(start.elapsed());
            let start = Instant::now();
            for (q, c) in queries.iter().zip(&candidates) {
                js_search(q, c, &registry, &js_cfg)?;
            }
            js_t.push(start.elapsed());
        }
        let adaptivity_secs = median(adapt_t).as_secs_f64();
        let js_secs = median(js_t).as_secs_f64();
        Ok(LatencyReport {
            partition_size: spec.partition_size,
            models: registry.len(),
            queries: queries.len(),
            repeats,
            adaptivity_secs,
            js_secs,
            overhead: adaptivity_secs / js_secs.max(1e-12),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioBand {
    pub pairs: usize,
    /// Smallest and largest observed `JS / H^2`.
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Empirical band of `JS / H^2` over random distribution pairs with
/// dimensions in `2..64`.
pub fn hellinger_ratio_band(pairs: usize, seed: u64) -> Result<RatioBand> {
    use fitsearch_core::metrics::{hellinger_sq, js_slices};
    use fitsearch_core::ProbabilityVector;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    while n < pairs {
        let k = rng.random_range(2..64);
        let p: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
        let q: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
        let (Ok(p), Ok(q)) = (ProbabilityVector::from_counts(&p), ProbabilityVector::from_counts(&q)) else {
            continue;
        };
        let h = hellinger_sq(&p, &q)?.value;
        if h < 1e-12 {
            continue;
        }
        let ratio = js_slices(p.entries(), q.entries()) / h;
        min = min.min(ratio);
        max = max.max(ratio);
        sum += ratio;
        n += 1;
    }
    Ok(RatioBand { pairs, min, max, mean: sum / pairs.max(1) as f64 })
}

/// Line-delimited JSON with a versioned header line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, kind: &str, rows: &[T]) -> Result<()> {
    let header = serde_json::json!({
        "format": BENCH_FORMAT,
        "version": BENCH_FORMAT_VERSION,
        "kind": kind,
        "count": rows.len(),
    });
    writeln!(w, "{header}")?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
