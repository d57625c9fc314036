use std::collections::BTreeSet;

use fitsearch_core::eval::{
    compare_metrics, generate_workload, model_id_for, CompareConfig, EvalMetric, SyntheticWorkloadSpec,
};
use fitsearch_core::metrics::js_slices;
use fitsearch_core::search::{search, ExactRescoring};
use fitsearch_core::sketch::Subspace;
use fitsearch_core::{
    AccuracyRow, AccuracyTable, DatasetSketch, ModelRecord, Registry, RegistryParams, SearchConfig,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn whole_js(a: &DatasetSketch, b: &DatasetSketch) -> f64 {
    let ids = a.feature_ids();
    let sub = Subspace::shared(a, b, &ids).unwrap();
    let p = sub.projector(a).unwrap().whole(a).unwrap();
    let q = sub.projector(b).unwrap().whole(b).unwrap();
    js_slices(p.entries(), q.entries())
}

#[test]
fn same_family_without_shift_is_close() {
    let spec = SyntheticWorkloadSpec { num_families: 1, datasets_per_family: 2, shift: 0.0, ..Default::default() };
    let s = generate_workload(&spec).unwrap().sketches().unwrap();
    let js = whole_js(&s[0], &s[1]);
    assert!(js < 0.02, "{js}");
}

#[test]
fn larger_shift_separates_families() {
    let mut prev = -1.0;
    for shift in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let spec = SyntheticWorkloadSpec {
            num_families: 2,
            datasets_per_family: 1,
            rows_per_dataset: 20_000,
            shift,
            ..Default::default()
        };
        let w = generate_workload(&spec).unwrap();
        let js = js_slices(&w.datasets[0].flat_generating(), &w.datasets[1].flat_generating());
        assert!(js > prev, "shift {shift}: {js} <= {prev}");
        prev = js;
    }
}

#[test]
fn table_count_at_full_scale() {
    let spec = SyntheticWorkloadSpec {
        num_families: 162,
        datasets_per_family: 1,
        rows_per_dataset: 50,
        partition_size: 50,
        ..Default::default()
    };
    let w = generate_workload(&spec).unwrap();
    assert_eq!(w.datasets.len(), 162);
    let ids: BTreeSet<_> = w.datasets.iter().map(|d| d.dataset_id.clone()).collect();
    assert_eq!(ids.len(), 162);
}

#[test]
fn generation_is_byte_identical() {
    let spec = SyntheticWorkloadSpec { num_families: 2, datasets_per_family: 2, rows_per_dataset: 200, ..Default::default() };
    let render = || {
        let w = generate_workload(&spec).unwrap();
        let names = spec.feature_names();
        let mut out = Vec::new();
        for d in &w.datasets {
            d.write_csv(&names, &mut out).unwrap();
        }
        w.truth.write_csv(&mut out).unwrap();
        out
    };
    assert_eq!(render(), render());
}

fn registry_for(w: &fitsearch_core::eval::Workload) -> (Registry, Vec<DatasetSketch>) {
    let sketches = w.sketches().unwrap();
    let mut reg = Registry::new(RegistryParams {
        bins_per_numeric_feature: w.spec.bins as u32,
        ..Default::default()
    })
    .unwrap();
    for (d, s) in w.datasets.iter().zip(&sketches) {
        reg.register(ModelRecord::new(model_id_for(&d.dataset_id), d.dataset_id.clone()), s.clone()).unwrap();
    }
    (reg, sketches)
}

#[test]
fn compare_metrics_on_synthetic_workload() {
    let spec = SyntheticWorkloadSpec { num_families: 5, datasets_per_family: 3, ..Default::default() };
    let w = generate_workload(&spec).unwrap();
    let (reg, sketches) = registry_for(&w);
    let cfg = CompareConfig {
        search: SearchConfig { t1: 0.0, t2: 0.0, exact_rescoring: ExactRescoring::On, ..Default::default() },
        metrics: vec![EvalMetric::Adaptivity, EvalMetric::Js, EvalMetric::L2Center],
    };
    let report = compare_metrics(&reg, &sketches, &w.truth, &cfg).unwrap();
    assert_eq!(report.rows.len(), sketches.len() * 3);
    let js = report.summary_for(EvalMetric::Js).unwrap();
    assert!(js.mean_pearson.unwrap() <= -0.9, "{js:?}");
    assert_eq!(report.summary_for(EvalMetric::Adaptivity).unwrap().top1_error, 0.0);
    assert!(report.summary_for(EvalMetric::L2Center).unwrap().mean_pearson.unwrap() < 0.0);
}

#[test]
fn perfect_metric_has_unit_pearson() {
    // truth defined from the source accuracies themselves
    let spec = SyntheticWorkloadSpec { num_families: 3, datasets_per_family: 2, rows_per_dataset: 500, ..Default::default() };
    let w = generate_workload(&spec).unwrap();
    let (mut reg, sketches) = registry_for(&w);
    let ids: Vec<String> = reg.records().into_iter().map(|r| r.model_id).collect();
    let mut fresh = Registry::new(*reg.params()).unwrap();
    let mut rows = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let acc = 0.3 + 0.1 * i as f64;
        let m = reg.get(id).unwrap().clone();
        let mut record = m.record.clone();
        record.source_accuracy = Some(acc);
        fresh.register(record, m.sketch.clone()).unwrap();
        for s in &sketches {
            rows.push(AccuracyRow { source_model_id: id.clone(), target_dataset_id: s.dataset_id.clone(), target_accuracy: acc });
        }
    }
    reg = fresh;
    let truth = AccuracyTable::new(rows).unwrap();
    let cfg = CompareConfig { metrics: vec![EvalMetric::SourceAccuracy], ..Default::default() };
    let report = compare_metrics(&reg, &sketches, &truth, &cfg).unwrap();
    let s = report.summary_for(EvalMetric::SourceAccuracy).unwrap();
    assert!((s.mean_pearson.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(s.top1_error, 0.0);
    assert_eq!(s.top2_error, 0.0);
}

#[test]
fn source_accuracy_against_shuffled_truth_is_weak() {
    let spec = SyntheticWorkloadSpec { num_families: 6, datasets_per_family: 4, rows_per_dataset: 500, ..Default::default() };
    let w = generate_workload(&spec).unwrap();
    let (reg0, sketches) = registry_for(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut reg = Registry::new(*reg0.params()).unwrap();
    for m in reg0.models() {
        let mut r = m.record.clone();
        r.source_accuracy = Some(rng.random());
        reg.register(r, m.sketch.clone()).unwrap();
    }
    let mut accs: Vec<f64> = w.truth.rows().map(|r| r.target_accuracy).collect();
    accs.shuffle(&mut rng);
    let truth = AccuracyTable::new(w.truth.rows().zip(accs).map(|(r, a)| AccuracyRow { target_accuracy: a, ..r })).unwrap();
    let cfg = CompareConfig { metrics: vec![EvalMetric::SourceAccuracy], ..Default::default() };
    let report = compare_metrics(&reg, &sketches, &truth, &cfg).unwrap();
    let p = report.summary_for(EvalMetric::SourceAccuracy).unwrap().mean_pearson.unwrap();
    assert!(p.abs() < 0.3, "{p}");
}

#[test]
fn registry_postings_and_round_trip() {
    let spec = SyntheticWorkloadSpec { num_families: 5, datasets_per_family: 2, rows_per_dataset: 600, ..Default::default() };
    let w = generate_workload(&spec).unwrap();
    let (reg, sketches) = registry_for(&w);
    assert_eq!(reg.len(), 10);
    let l = reg.params().minhash.num_bands;
    for m in reg.models() {
        for fid in m.feature_signatures.keys() {
            let n: usize = reg
                .band_tables()
                .iter()
                .map(|t| {
                    let sig = &m.feature_signatures[fid][t.band_index as usize];
                    t.probe(&sig.values).filter(|p| p.model_id == m.record.model_id && p.feature_id == *fid).count()
                })
                .sum();
            assert_eq!(n, l);
        }
    }
    let loaded = Registry::from_bytes(&reg.to_bytes().unwrap()).unwrap();
    let again = Registry::from_bytes(&loaded.to_bytes().unwrap()).unwrap();
    for q in &sketches {
        let cfg = SearchConfig::default();
        let a = search(q, &reg, &cfg).unwrap();
        assert_eq!(a, search(q, &loaded, &cfg).unwrap());
        assert_eq!(a, search(q, &again, &cfg).unwrap());
    }
}
