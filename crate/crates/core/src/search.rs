//! Two-stage model search.
//!
//! Stage one finds models whose features overlap the query's, using the
//! registry's MinHash band tables. Stage two scores each candidate over the
//! shared bins: adaptivity (fraction of query partitions with a close
//! partition in the model's training data), whole-dataset JS, or the L2
//! distance between partition centres. JS-LSH signatures are computed here,
//! at query time, because the shared space is only known now.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::digest_values;
use crate::lsh::{
    any_band_collides, estimate_distance, js_from_hellinger_distance, slot_agreement, JsLshParams,
    PStableFamily, PStableKind, Signature,
};
use crate::metrics::{
    adaptivity_numerator, exact_adaptivity_with, js_slices, l2_distance, AdaptivityMode,
};
use crate::registry::Registry;
use crate::sketch::{DatasetSketch, FeatureId, ProbabilityVector, Subspace};

/// Candidate count up to which [`ExactRescoring::Auto`] rescoring is on.
pub const AUTO_RESCORE_LIMIT: usize = 64;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Adaptivity,
    Js,
    L2Center,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "adaptivity" => Ok(Metric::Adaptivity),
            "js" => Ok(Metric::Js),
            "l2_center" | "l2" => Ok(Metric::L2Center),
            other => Err(Error::Invalid(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Adaptivity => "adaptivity",
            Metric::Js => "js",
            Metric::L2Center => "l2_center",
        })
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactRescoring {
    /// On when there are at most [`AUTO_RESCORE_LIMIT`] candidates.
    #[default]
    Auto,
    On,
    Off,
}

impl ExactRescoring {
    pub fn enabled(self, candidates: usize) -> bool {
        match self {
            ExactRescoring::Auto => candidates <= AUTO_RESCORE_LIMIT,
            ExactRescoring::On => true,
            ExactRescoring::Off => false,
        }
    }
}

impl std::str::FromStr for ExactRescoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(ExactRescoring::Auto),
            "on" | "true" | "yes" => Ok(ExactRescoring::On),
            "off" | "false" | "no" => Ok(ExactRescoring::Off),
            other => Err(Error::Invalid(format!("exact rescoring must be auto, on or off, got `{other}`"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Overlap ratio a candidate must exceed.
    pub t1: f64,
    /// Estimated Jaccard a feature pair must reach.
    pub t2: f64,
    pub t_adaptivity: f64,
    pub t_js: f64,
    pub metric: Metric,
    pub exact_rescoring: ExactRescoring,
    pub adaptivity_mode: AdaptivityMode,
    /// Truncate the ranked output.
    pub top: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            t1: 0.5,
            t2: 0.5,
            t_adaptivity: 0.0,
            t_js: 0.1,
            metric: Metric::Adaptivity,
            exact_rescoring: ExactRescoring::Auto,
            adaptivity_mode: AdaptivityMode::DistinctTargets,
            top: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t1", self.t1), ("t2", self.t2), ("t_adaptivity", self.t_adaptivity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.t_js >= 0.0 && self.t_js.is_finite()) {
            return Err(Error::Invalid(format!("t_js must be a non-negative number, got {}", self.t_js)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub query_feature: FeatureId,
    pub model_feature: FeatureId,
    pub estimated_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapCandidate {
    pub model_id: String,
    pub matched_feature_pairs: Vec<FeatureMatch>,
    pub overlap_ratio: f64,
}

impl OverlapCandidate {
    /// Features present under the same id on both sides.
    pub fn shared_features(&self) -> Vec<FeatureId> {
        let mut ids: Vec<_> = self
            .matched_feature_pairs
            .iter()
            .filter(|m| m.query_feature == m.model_feature)
            .map(|m| m.query_feature)
            .collect();
        ids.sort_unstable();
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub model_id: String,
    pub overlap_ratio: f64,
    /// Adaptivity, `-JS` or `-L2` as estimated by LSH.
    pub score: f64,
    pub num_matches: usize,
    pub nt: usize,
    pub exact_score: Option<f64>,
}

impl SearchResult {
    /// Value the ranking and thresholds use.
    pub fn ranking_key(&self) -> f64 {
        self.exact_score.unwrap_or(self.score)
    }
}

/// Score descending, then `model_id` ascending.
pub fn rank(results: &mut [SearchResult]) {
    results.sort_by(|a, b| {
        b.ranking_key()
            .total_cmp(&a.ranking_key())
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
}

fn check_query(query: &DatasetSketch, registry: &Registry) -> Result<()> {
    query.validate()?;
    registry.params().check_sketch(query)
}

// ---------------------------------------------------------------------------
// Stage one

pub fn overlap_search(
    query: &DatasetSketch,
    registry: &Registry,
    config: &SearchConfig,
) -> Result<Vec<OverlapCandidate>> {
    config.validate()?;
    check_query(query, registry)?;
    if registry.is_empty() || query.descriptors.is_empty() {
        return Ok(Vec::new());
    }
    let query_sigs = registry.feature_signatures(query)?;
    let tables = registry.band_tables();

    let mut pairs: BTreeSet<(&str, FeatureId, FeatureId)> = BTreeSet::new();
    for (qf, sigs) in &query_sigs {
        for s in sigs {
            for p in tables[s.band_index as usize].probe(&s.values) {
                pairs.insert((p.model_id.as_str(), *qf, p.feature_id));
            }
        }
    }

    let mut per_model: BTreeMap<&str, Vec<FeatureMatch>> = BTreeMap::new();
    for (model_id, qf, mf) in pairs {
        let model = registry.get(model_id).expect("postings reference live models");
        let est = slot_agreement(&query_sigs[&qf], &model.feature_signatures[&mf]);
        if est >= config.t2 {
            per_model.entry(model_id).or_default().push(FeatureMatch {
                query_feature: qf,
                model_feature: mf,
                estimated_jaccard: est,
            });
        }
    }

    let n_query = query.descriptors.len() as f64;
    let mut out = Vec::new();
    for (model_id, mut matches) in per_model {
        matches.sort_by(|a, b| {
            b.estimated_jaccard
                .total_cmp(&a.estimated_jaccard)
                .then(a.query_feature.cmp(&b.query_feature))
                .then(a.model_feature.cmp(&b.model_feature))
        });
        let mut used_q = BTreeSet::new();
        let mut used_m = BTreeSet::new();
        let mut chosen: Vec<FeatureMatch> = matches
            .into_iter()
            .filter(|m| {
                if used_q.contains(&m.query_feature) || used_m.contains(&m.model_feature) {
                    return false;
                }
                used_q.insert(m.query_feature);
                used_m.insert(m.model_feature);
                true
            })
            .collect();
        chosen.sort_by_key(|m| m.query_feature);
        let overlap_ratio = chosen.len() as f64 / n_query;
        if overlap_ratio > config.t1 {
            out.push(OverlapCandidate { model_id: model_id.to_string(), matched_feature_pairs: chosen, overlap_ratio });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage two

/// Everything computed once per distinct shared space.
struct SpaceState {
    family: PStableFamily,
    query_signatures: Vec<Vec<Signature>>,
}

struct Prepared<'a> {
    candidate: &'a OverlapCandidate,
    source: &'a DatasetSketch,
    space: Subspace,
}

/// Resolve candidates to models and shared spaces.
fn prepare<'a>(
    candidates: &'a [OverlapCandidate],
    registry: &'a Registry,
    query: &DatasetSketch,
) -> Result<Vec<Prepared<'a>>> {
    candidates
        .par_iter()
        .map(|c| {
            let model = registry
                .get(&c.model_id)
                .ok_or_else(|| Error::NotFound(format!("model `{}`", c.model_id)))?;
            let space = Subspace::shared(&model.sketch, query, &c.shared_features())?;
            Ok(Prepared { candidate: c, source: &model.sketch, space })
        })
        .collect()
}

/// Build the hash family and query signatures for every distinct space.
fn space_states<F>(
    prepared: &[Prepared<'_>],
    kind: PStableKind,
    params: JsLshParams,
    query_vectors: F,
) -> Result<HashMap<Vec<u64>, SpaceState>>
where
    F: Fn(&Subspace) -> Result<Vec<Vec<f64>>> + Sync,
{
    let mut distinct: BTreeMap<&[u64], &Subspace> = BTreeMap::new();
    for p in prepared {
        distinct.entry(p.space.labels()).or_insert(&p.space);
    }
    distinct
        .into_par_iter()
        .map(|(labels, space)| {
            let family = PStableFamily::new(kind, params, labels)?;
            let query_signatures = query_vectors(space)?
                .iter()
                .map(|v| family.signatures(v))
                .collect::<Result<_>>()?;
            Ok((labels.to_vec(), SpaceState { family, query_signatures }))
        })
        .collect()
}

/// Pairs `(i, j)` whose signatures collide in at least one band. The side
/// with more entries is indexed and the other side probes it.
pub fn colliding_pairs(source: &[Vec<Signature>], target: &[Vec<Signature>]) -> BTreeSet<(usize, usize)> {
    let source_indexed = source.len() >= target.len();
    let (indexed, probing) = if source_indexed { (source, target) } else { (target, source) };
    let mut tables: HashMap<(u32, u64), Vec<usize>> = HashMap::new();
    for (i, sigs) in indexed.iter().enumerate() {
        for s in sigs {
            tables.entry((s.band_index, digest_values(&s.values))).or_default().push(i);
        }
    }
    let mut out = BTreeSet::new();
    for (j, sigs) in probing.iter().enumerate() {
        for s in sigs {
            if let Some(hits) = tables.get(&(s.band_index, digest_values(&s.values))) {
                for &i in hits {
                    if indexed[i][s.band_index as usize].values == s.values {
                        out.insert(if source_indexed { (i, j) } else { (j, i) });
                    }
                }
            }
        }
    }
    out
}

fn project_all(space: &Subspace, sketch: &DatasetSketch) -> Result<Vec<Vec<f64>>> {
    Ok(space
        .projector(sketch)?
        .partitions(sketch)?
        .into_iter()
        .map(ProbabilityVector::into_entries)
        .collect())
}

fn project_whole(space: &Subspace, sketch: &DatasetSketch) -> Result<Vec<Vec<f64>>> {
    Ok(vec![space.projector(sketch)?.whole(sketch)?.into_entries()])
}

fn project_center(space: &Subspace, sketch: &DatasetSketch) -> Result<Vec<Vec<f64>>> {
    Ok(vec![space.projector(sketch)?.center(sketch)?])
}

fn width_params(params: &JsLshParams, t_js: f64) -> JsLshParams {
    params.with_width(params.width_for(t_js))
}

/// LSH-matched `(source partition, target partition)` pairs over `shared`.
pub fn lsh_partition_matches(
    source: &DatasetSketch,
    target: &DatasetSketch,
    shared: &[FeatureId],
    params: &JsLshParams,
    t_js: f64,
) -> Result<BTreeSet<(usize, usize)>> {
    let space = Subspace::shared(source, target, shared)?;
    let family = PStableFamily::new(PStableKind::JensenShannon, width_params(params, t_js), space.labels())?;
    let sign = |s: &DatasetSketch| -> Result<Vec<Vec<Signature>>> {
        project_all(&space, s)?.iter().map(|v| family.signatures(v)).collect()
    };
    Ok(colliding_pairs(&sign(source)?, &sign(target)?))
}

fn finish(mut results: Vec<SearchResult>, config: &SearchConfig) -> Vec<SearchResult> {
    rank(&mut results);
    if let Some(k) = config.top {
        results.truncate(k);
    }
    results
}

pub fn adaptivity_search(
    query: &DatasetSketch,
    candidates: &[OverlapCandidate],
    registry: &Registry,
    config: &SearchConfig,
) -> Result<Vec<SearchResult>> {
    config.validate()?;
    let prepared = prepare(candidates, registry, query)?;
    let states = space_states(
        &prepared,
        PStableKind::JensenShannon,
        width_params(&registry.params().jslsh, config.t_js),
        |space| project_all(space, query),
    )?;
    let rescore = config.exact_rescoring.enabled(candidates.len());
    let nt = query.num_partitions();

    let results: Vec<Option<SearchResult>> = prepared
        .par_iter()
        .map(|p| {
            let state = &states[p.space.labels()];
            let source_sigs = project_all(&p.space, p.source)?
                .iter()
                .map(|v| state.family.signatures(v))
                .collect::<Result<Vec<_>>>()?;
            let pairs = colliding_pairs(&source_sigs, &state.query_signatures);
            let num_matches = adaptivity_numerator(&pairs, config.adaptivity_mode);
            let exact_score = if rescore {
                let shared = p.candidate.shared_features();
                Some(exact_adaptivity_with(p.source, query, &shared, config.t_js, config.adaptivity_mode)?.value)
            } else {
                None
            };
            let r = SearchResult {
                model_id: p.candidate.model_id.clone(),
                overlap_ratio: p.candidate.overlap_ratio,
                score: num_matches as f64 / nt as f64,
                num_matches,
                nt,
                exact_score,
            };
            Ok((r.ranking_key() >= config.t_adaptivity).then_some(r))
        })
        .collect::<Result<_>>()?;
    Ok(finish(results.into_iter().flatten().collect(), config))
}

/// Whole-dataset JS between the query and each candidate. With rescoring
/// off a candidate is kept when its signatures collide in some band, with
/// rescoring on when its exact JS is at most `t_js`.
pub fn js_search(
    query: &DatasetSketch,
    candidates: &[OverlapCandidate],
    registry: &Registry,
    config: &SearchConfig,
) -> Result<Vec<SearchResult>> {
    js_impl(query, candidates, registry, config, true)
}

/// [`js_search`] without the threshold: every candidate is scored and ranked.
pub fn js_scores(
    query: &DatasetSketch,
    candidates: &[OverlapCandidate],
    registry: &Registry,
    config: &SearchConfig,
) -> Result<Vec<SearchResult>> {
    js_impl(query, candidates, registry, config, false)
}

fn js_impl(
    query: &DatasetSketch,
    candidates: &[OverlapCandidate],
    registry: &Registry,
    config: &SearchConfig,
    threshold: bool,
) -> Result<Vec<SearchResult>> {
    config.validate()?;
    let params = width_params(&registry.params().jslsh, config.t_js);
    let width = params.r;
    let prepared = prepare(candidates, registry, query)?;
    let states = space_states(&prepared, PStableKind::JensenShannon, params, |space| {
        project_whole(space, query)
    })?;
    let rescore = config.exact_rescoring.enabled(candidates.len());

    let results: Vec<Option<SearchResult>> = prepared
        .par_iter()
        .map(|p| {
            let state = &states[p.space.labels()];
            let source = project_whole(&p.space, p.source)?.remove(0);
            let sigs = state.family.signatures(&source)?;
            let query_sigs = &state.query_signatures[0];
            let collide = any_band_collides(&sigs, query_sigs);
            let distance = estimate_distance(slot_agreement(&sigs, query_sigs), width, std::f64::consts::SQRT_2);
            let exact = rescore.then(|| {
                let q = project_whole(&p.space, query).map(|mut v| v.remove(0));
                q.map(|q| js_slices(&source, &q))
            });
            let exact = exact.transpose()?;
            let keep = !threshold
                || match exact {
                    Some(js) => js <= config.t_js,
                    None => collide,
                };
            Ok(keep.then(|| SearchResult {
                model_id: p.candidate.model_id.clone(),
                overlap_ratio: p.candidate.overlap_ratio,
                score: -js_from_hellinger_distance(distance),
                num_matches: collide as usize,
                nt: 1,
                exact_score: exact.map(|js| -js),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(finish(results.into_iter().flatten().collect(), config))
}

/// L2 distance between row-weighted partition centres. Not thresholded.
pub fn l2_center_search(
    query: &DatasetSketch,
    candidates: &[OverlapCandidate],
    registry: &Registry,
    config: &SearchConfig,
) -> Result<Vec<SearchResult>> {
    config.validate()?;
    let params = width_params(&registry.params().jslsh, config.t_js);
    let width = params.r;
    let prepared = prepare(candidates, registry, query)?;
    let states = space_states(&prepared, PStableKind::Euclidean, params, |space| project_center(space, query))?;
    let rescore = config.exact_rescoring.enabled(candidates.len());

    let results = prepared
        .par_iter()
        .map(|p| {
            let state = &states[p.space.labels()];
            let source = project_center(&p.space, p.source)?.remove(0);
            let sigs = state.family.signatures(&source)?;
            let query_sigs = &state.query_signatures[0];
            let distance = estimate_distance(slot_agreement(&sigs, query_sigs), width, std::f64::consts::SQRT_2);
            let exact_score = if rescore {
                let q = project_center(&p.space, query)?.remove(0);
                Some(-l2_distance(&source, &q)?)
            } else {
                None
            };
            Ok(SearchResult {
                model_id: p.candidate.model_id.clone(),
                overlap_ratio: p.candidate.overlap_ratio,
                score: -distance,
                num_matches: any_band_collides(&sigs, query_sigs) as usize,
                nt: 1,
                exact_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(results, config))
}

/// Overlap search followed by the configured metric.
pub fn search(query: &DatasetSketch, registry: &Registry, config: &SearchConfig) -> Result<Vec<SearchResult>> {
    let candidates = overlap_search(query, registry, config)?;
    match config.metric {
        Metric::Adaptivity => adaptivity_search(query, &candidates, registry, config),
        Metric::Js => js_search(query, &candidates, registry, config),
        Metric::L2Center => l2_center_search(query, &candidates, registry, config),
    }
}

pub const RESULTS_FORMAT: &str = "fitsearch-results";
pub const RESULTS_FORMAT_VERSION: u32 = 1;

/// Ranked results tagged with the registry state that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub manifest_version: u64,
    pub config: SearchConfig,
    pub results: Vec<SearchResult>,
}

impl SearchResponse {
    pub fn run(query: &DatasetSketch, registry: &Registry, config: &SearchConfig) -> Result<Self> {
        config.validate()?;
        Ok(SearchResponse {
            manifest_version: registry.manifest_version(),
            config: *config,
            results: search(query, registry, config)?,
        })
    }

    /// Line-delimited JSON: a header line, then one line per result.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::json!({
            "format": RESULTS_FORMAT,
            "version": RESULTS_FORMAT_VERSION,
            "manifest_version": self.manifest_version,
            "config": self.config,
            "count": self.results.len(),
        });
        writeln!(w, "{header}")?;
        for r in &self.results {
            let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: String| Error::Format(format!("results file: {m}"));
        let header: serde_json::Value =
            serde_json::from_str(lines.next().ok_or_else(|| bad("empty".into()))?).map_err(|e| bad(e.to_string()))?;
        if header["format"] != RESULTS_FORMAT || header["version"] != RESULTS_FORMAT_VERSION {
            return Err(bad(format!("unsupported header {header}")));
        }
        let manifest_version = header["manifest_version"].as_u64().ok_or_else(|| bad("missing manifest_version".into()))?;
        let config = serde_json::from_value(header["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let results = lines
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(SearchResponse { manifest_version, config, results })
    }
}

// ---------------------------------------------------------------------------
// Bulk neighbour index

/// JS-LSH index over whole-dataset distributions of many sketches that share
/// a feature set. Answers "which datasets are within JS `t` of each other".
pub struct JsNeighborIndex {
    ids: Vec<String>,
    signatures: Vec<Vec<Signature>>,
    width: f64,
}

impl JsNeighborIndex {
    pub fn build(sketches: &[&DatasetSketch], features: &[FeatureId], params: &JsLshParams, t_js: f64) -> Result<Self> {
        let space = Subspace::common(sketches, features)?;
        let params = width_params(params, t_js);
        let family = PStableFamily::new(PStableKind::JensenShannon, params, space.labels())?;
        let signatures = sketches
            .par_iter()
            .map(|s| family.signatures(&project_whole(&space, s)?[0]))
            .collect::<Result<_>>()?;
        Ok(JsNeighborIndex {
            ids: sketches.iter().map(|s| s.dataset_id.clone()).collect(),
            signatures,
            width: params.r,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Unordered index pairs `(i < j)` colliding in at least one band.
    pub fn neighbor_pairs(&self) -> BTreeSet<(usize, usize)> {
        colliding_pairs(&self.signatures, &self.signatures)
            .into_iter()
            .filter(|(i, j)| i < j)
            .collect()
    }

    /// JS estimated from slot agreement.
    pub fn estimated_js(&self, i: usize, j: usize) -> f64 {
        let a = slot_agreement(&self.signatures[i], &self.signatures[j]);
        js_from_hellinger_distance(estimate_distance(a, self.width, std::f64::consts::SQRT_2))
    }
}

/// Brute-force counterpart of [`JsNeighborIndex::neighbor_pairs`].
pub fn exact_neighbor_pairs(
    sketches: &[&DatasetSketch],
    features: &[FeatureId],
    t_js: f64,
) -> Result<BTreeSet<(usize, usize)>> {
    let space = Subspace::common(sketches, features)?;
    let dists: Vec<Vec<f64>> = sketches
        .iter()
        .map(|s| Ok(project_whole(&space, s)?.remove(0)))
        .collect::<Result<_>>()?;
    let mut out = BTreeSet::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            if js_slices(&dists[i], &dists[j]) <= t_js {
                out.insert((i, j));
            }
        }
    }
    Ok(out)
}
