use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn fitsearch(dir: &Path, args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_fitsearch")).current_dir(dir).args(args).output().unwrap();
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = fitsearch(dir, args);
    assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
    o.stdout
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Workload of 4 families x 2 datasets; the ds000 datasets are registered.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("spec.toml"),
        "num_families = 4\ndatasets_per_family = 2\nrows_per_dataset = 1000\n",
    )
    .unwrap();
    ok(d, &["generate", "--workload-spec", "spec.toml", "--out-dir", "wl"]);
    for f in 0..4 {
        let id = format!("fam{f:03}-ds000");
        ok(
            d,
            &[
                "register",
                "reg.fits",
                &format!("wl/sketches/{id}.json"),
                "--model-id",
                &format!("model-{id}"),
                "--create",
            ],
        );
    }
    let reg = d.join("reg.fits");
    (dir, reg)
}

fn write_csv(path: &Path, rows: usize) {
    let mut s = String::from("a,b,label\n");
    for i in 0..rows {
        s.push_str(&format!("{},{},{}\n", i % 17, (i * 7) % 5, if i % 3 == 0 { "yes" } else { "no" }));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn sketch_reports_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("t.csv"), 1000);
    let s = ok(d, &["sketch", "t.csv", "--partition-size", "500", "--out", "t.json"]);
    assert!(s.contains("2 partitions"), "{s}");
    assert!(s.contains("1000 rows") && s.contains("3 features"), "{s}");
    for m in ["300", "800"] {
        ok(d, &["sketch", "t.csv", "--partition-size", m, "--exclude", "label", "--out", "u.json"]);
    }
    let s = ok(d, &["sketch", "t.csv", "--partition-size", "300", "--drop-residue", "--out", "u.json"]);
    assert!(s.contains("900 rows") && s.contains("3 partitions"), "{s}");
}

#[test]
fn malformed_csv_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.csv"), "a,b\n1,2\n3,4\n5\n").unwrap();
    let o = fitsearch(d, &["sketch", "bad.csv", "--out", "x.json"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("line 4"), "{}", o.stderr);
    let o = fitsearch(d, &["sketch", "missing.csv", "--out", "x.json"]);
    assert_eq!(o.code, 2);
    let o = fitsearch(d, &["sketch", "bad.csv", "--bogus"]);
    assert_eq!(o.code, 2);
}

#[test]
fn register_inspect_and_errors() {
    let (dir, _) = fixture();
    let d = dir.path();
    let s = ok(d, &["inspect", "reg.fits"]);
    assert!(s.contains("4 models") && s.contains("model-fam002-ds000"), "{s}");
    let s = ok(d, &["inspect", "reg.fits", "--model", "model-fam001-ds000"]);
    assert!(s.contains("fam001-ds000"));

    let o = fitsearch(d, &["register", "reg.fits", "wl/sketches/fam000-ds000.json", "--model-id", "model-fam000-ds000"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    let o = fitsearch(
        d,
        &["register", "reg.fits", "wl/sketches/fam000-ds001.json", "--model-id", "new", "--source-accuracy", "1.2"],
    );
    assert_eq!(o.code, 2);
    let o = fitsearch(d, &["register", "none.fits", "wl/sketches/fam000-ds001.json", "--model-id", "new"]);
    assert_eq!(o.code, 2);
    let s = ok(d, &["inspect", "reg.fits"]);
    assert!(s.contains("manifest version 4"), "{s}");

    let bytes = std::fs::read(d.join("reg.fits")).unwrap();
    std::fs::write(d.join("cut.fits"), &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(fitsearch(d, &["inspect", "cut.fits"]).code, 4);
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 10] ^= 0xff;
    std::fs::write(d.join("flip.fits"), &flipped).unwrap();
    assert_eq!(fitsearch(d, &["query", "flip.fits", "wl/sketches/fam000-ds001.json"]).code, 4);
}

#[test]
fn query_ranks_own_model_first_and_truncates() {
    let (dir, reg) = fixture();
    let d = dir.path();
    let before = digest(&reg);
    let s = ok(d, &["query", "reg.fits", "wl/sketches/fam002-ds000.json"]);
    let first = s.lines().nth(2).unwrap();
    assert!(first.contains("model-fam002-ds000"), "{s}");

    let s = ok(d, &["query", "reg.fits", "wl/sketches/fam001-ds001.json", "--top", "2", "--t1", "0", "--out", "r.jsonl"]);
    assert_eq!(s.lines().count(), 4, "{s}");
    assert!(s.lines().nth(2).unwrap().contains("model-fam001-ds000"));
    let text = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["format"], "fitsearch-results");
    assert_eq!(header["version"], 1);
    assert_eq!(header["count"], 2);
    assert_eq!(text.lines().count(), 3);

    for metric in ["js", "l2_center"] {
        let s = ok(d, &["query", "reg.fits", "wl/sketches/fam003-ds001.json", "--metric", metric, "--t-js", "0.69"]);
        assert!(s.lines().nth(2).unwrap().contains("model-fam003-ds000"), "{metric}: {s}");
    }
    let a = ok(d, &["query", "reg.fits", "wl/sketches/fam003-ds001.json", "--exact-rescoring", "off", "--seed", "3"]);
    let b = ok(d, &["query", "reg.fits", "wl/sketches/fam003-ds001.json", "--exact-rescoring", "off", "--seed", "3"]);
    assert_eq!(a, b);
    assert_eq!(digest(&reg), before);
}

#[test]
fn query_on_empty_registry_exits_0() {
    let (dir, _) = fixture();
    let d = dir.path();
    let sketch = d.join("wl/sketches/fam000-ds000.json");
    let reg = d.join("empty.fits");
    fitsearch_core::Registry::new(fitsearch_core::RegistryParams { bins_per_numeric_feature: 16, ..Default::default() })
        .unwrap()
        .save(&reg)
        .unwrap();
    let s = ok(d, &["query", "empty.fits", sketch.to_str().unwrap()]);
    assert!(s.contains("no models matched"));
    let o = fitsearch(d, &["query", "empty.fits", sketch.to_str().unwrap(), "--t1", "2"]);
    assert_eq!(o.code, 2);
}

#[test]
fn eval_reports_and_never_mutates() {
    let (dir, reg) = fixture();
    let d = dir.path();
    std::fs::create_dir(d.join("q")).unwrap();
    for f in 0..4 {
        let id = format!("fam{f:03}-ds001");
        std::fs::copy(d.join(format!("wl/sketches/{id}.json")), d.join(format!("q/{id}.json"))).unwrap();
    }
    let before = digest(&reg);
    let s = ok(
        d,
        &["eval", "reg.fits", "q", "wl/truth.csv", "--out", "rows.csv", "--summary-out", "sum.csv", "--t1", "0", "--t2", "0"],
    );
    assert!(s.contains("4 queries, 16 report rows"), "{s}");
    assert_eq!(std::fs::read_to_string(d.join("rows.csv")).unwrap().lines().count(), 17);
    let sum = std::fs::read_to_string(d.join("sum.csv")).unwrap();
    assert!(sum.starts_with("metric,mean_pearson,top1_error,top2_error,queries"));
    assert_eq!(digest(&reg), before);

    let truth = std::fs::read_to_string(d.join("wl/truth.csv")).unwrap();
    let trimmed: String = truth.lines().filter(|l| !l.starts_with("model-fam002-ds000,fam000-ds001")).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("partial.csv"), trimmed).unwrap();
    let o = fitsearch(d, &["eval", "reg.fits", "q", "partial.csv", "--out", "rows.csv", "--t1", "0", "--t2", "0"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn eval_perfect_proxy_gives_unit_pearson() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), "num_families = 4\ndatasets_per_family = 1\nrows_per_dataset = 600\n").unwrap();
    ok(d, &["generate", "--workload-spec", "spec.toml", "--out-dir", "wl"]);
    let mut truth = String::from("source_model_id,target_dataset_id,target_accuracy\n");
    for f in 0..3 {
        let acc = format!("{}", 0.5 + 0.1 * f as f64);
        ok(
            d,
            &[
                "register",
                "reg.fits",
                &format!("wl/sketches/fam{f:03}-ds000.json"),
                "--model-id",
                &format!("m{f}"),
                "--source-accuracy",
                &acc,
                "--create",
            ],
        );
        truth.push_str(&format!("m{f},fam003-ds000,{acc}\n"));
    }
    std::fs::write(d.join("truth.csv"), truth).unwrap();
    std::fs::create_dir(d.join("q")).unwrap();
    std::fs::copy(d.join("wl/sketches/fam003-ds000.json"), d.join("q/fam003-ds000.json")).unwrap();
    ok(d, &["eval", "reg.fits", "q", "truth.csv", "--eval-metric", "source_accuracy", "--out", "rows.csv"]);
    let rows = std::fs::read_to_string(d.join("rows.csv")).unwrap();
    let row: Vec<&str> = rows.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "source_accuracy");
    assert!((row[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{rows}");
    assert_eq!(row[5], "true");
}

#[test]
fn eval_thirteen_queries_thirteen_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), "num_families = 13\ndatasets_per_family = 2\nrows_per_dataset = 500\n").unwrap();
    ok(d, &["generate", "--workload-spec", "spec.toml", "--out-dir", "wl"]);
    std::fs::create_dir(d.join("q")).unwrap();
    for f in 0..13 {
        let id = format!("fam{f:03}-ds000");
        ok(d, &["register", "reg.fits", &format!("wl/sketches/{id}.json"), "--model-id", &format!("model-{id}"), "--create"]);
        let q = format!("fam{f:03}-ds001");
        std::fs::copy(d.join(format!("wl/sketches/{q}.json")), d.join(format!("q/{q}.json"))).unwrap();
    }
    let s = ok(d, &["eval", "reg.fits", "q", "wl/truth.csv", "--eval-metric", "js", "--out", "rows.csv", "--t1", "0"]);
    assert!(s.contains("13 queries, 13 report rows"), "{s}");
}

#[test]
fn bench_sweep_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), "num_families = 5\ndatasets_per_family = 3\nrows_per_dataset = 500\n").unwrap();
    let s = ok(
        d,
        &["bench", "--workload-spec", "spec.toml", "--sweep", "r", "--values", "0.5,1,2", "--out", "b.jsonl", "--seed", "9"],
    );
    assert_eq!(s.lines().count(), 4, "{s}");
    let text = std::fs::read_to_string(d.join("b.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("\"kind\":\"sweep\""));
    let again = ok(
        d,
        &["bench", "--workload-spec", "spec.toml", "--sweep", "r", "--values", "0.5,1,2", "--seed", "9"],
    );
    assert_eq!(s, again);
    assert_eq!(fitsearch(d, &["bench", "--workload-spec", "spec.toml"]).code, 2);
    assert_eq!(fitsearch(d, &["bench", "--sweep", "q"]).code, 2);
}
