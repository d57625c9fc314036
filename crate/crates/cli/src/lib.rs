//! The `fitsearch` command line.
//!
//! Exit codes: 0 ok, 2 input error, 3 conflict, 4 corruption.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fitsearch_bench::{hellinger_ratio_band, latency_profile, speedup, sweep, table_workload, write_jsonl, SweepParam};
use fitsearch_core::eval::{compare_metrics, generate_workload, model_id_for, TRUTH_PROXY_DESCRIPTION};
use fitsearch_core::registry::FORMAT_VERSION;
use fitsearch_core::sketch::sketch_csv_file;
use fitsearch_core::{
    AccuracyTable, AdaptivityMode, CompareConfig, DatasetSketch, Error, EvalMetric, ExactRescoring, IngestOptions,
    JsLshParams, Metric, MinHashParams, ModelRecord, Registry, RegistryParams, Result, SearchConfig,
    SearchResponse, SyntheticWorkloadSpec,
};
use fitsearch_service::{AppState, ServiceConfig, DEFAULT_ASYNC_PARTITIONS};

#[derive(Debug, Parser)]
#[command(name = "fitsearch", version, about = "Search a model registry for models that fit a dataset")]
pub struct Cli {
    /// Overrides hash seeds of benchmark runs. Registry signatures always use
    /// the seeds stored in the registry.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a partitioned sketch from a CSV file.
    Sketch(SketchArgs),
    /// Add a model and its training-data sketch to a registry.
    Register(RegisterArgs),
    /// Rank registered models for a query sketch.
    Query(QueryArgs),
    /// Compare metrics against a table of target accuracies.
    Eval(EvalArgs),
    /// Parameter sweeps and timing.
    Bench(BenchArgs),
    /// Show registry contents.
    Inspect(InspectArgs),
    /// Write a synthetic workload: tables, sketches and accuracy proxy.
    Generate(GenerateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SketchArgs {
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lines of `name,kind[,min,max]`; only listed columns are sketched.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub bins: u32,
    #[arg(long, default_value_t = 500)]
    pub partition_size: usize,
    /// Defaults to the CSV file stem.
    #[arg(long)]
    pub dataset_id: Option<String>,
    /// Column to leave out, e.g. the label. Repeatable.
    #[arg(long)]
    pub exclude: Vec<String>,
    #[arg(long)]
    pub drop_residue: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub registry: PathBuf,
    pub sketch: PathBuf,
    #[arg(long)]
    pub model_id: String,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "")]
    pub task_tag: String,
    #[arg(long)]
    pub source_accuracy: Option<f64>,
    #[arg(long, default_value = "")]
    pub notes: String,
    /// Create the registry if it does not exist.
    #[arg(long)]
    pub create: bool,
    #[command(flatten)]
    pub params: ParamArgs,
}

/// Hash parameters of a new registry.
#[derive(Debug, Args)]
pub struct ParamArgs {
    #[arg(long, default_value_t = 4)]
    pub minhash_k: usize,
    #[arg(long, default_value_t = 32)]
    pub minhash_l: usize,
    #[arg(long, default_value_t = 8)]
    pub jslsh_k: usize,
    #[arg(long, default_value_t = 16)]
    pub jslsh_l: usize,
    #[arg(long, default_value_t = 1.5)]
    pub r: f64,
}

impl ParamArgs {
    fn registry_params(&self, bins: u32) -> RegistryParams {
        let d = RegistryParams::default();
        RegistryParams {
            minhash: MinHashParams { k_per_band: self.minhash_k, num_bands: self.minhash_l, ..d.minhash },
            jslsh: JsLshParams { k_per_band: self.jslsh_k, num_bands: self.jslsh_l, r: self.r, ..d.jslsh },
            bins_per_numeric_feature: bins,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    #[arg(long, default_value = "adaptivity")]
    pub metric: Metric,
    #[arg(long, default_value_t = 0.5)]
    pub t1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t_adaptivity: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_js: f64,
    #[arg(long)]
    pub top: Option<usize>,
    /// auto, on or off.
    #[arg(long, default_value = "auto")]
    pub exact_rescoring: ExactRescoring,
    /// Count matched partition pairs instead of matched target partitions.
    #[arg(long)]
    pub pair_count: bool,
}

impl SearchArgs {
    pub fn config(&self) -> SearchConfig {
        SearchConfig {
            t1: self.t1,
            t2: self.t2,
            t_adaptivity: self.t_adaptivity,
            t_js: self.t_js,
            metric: self.metric,
            exact_rescoring: self.exact_rescoring,
            adaptivity_mode: if self.pair_count { AdaptivityMode::PairCount } else { AdaptivityMode::DistinctTargets },
            top: self.top,
        }
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub registry: PathBuf,
    pub sketch: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Line-delimited JSON results with a versioned header.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub registry: PathBuf,
    /// Directory of query sketch files (`*.json`).
    pub queries: PathBuf,
    /// CSV of `source_model_id,target_dataset_id,target_accuracy`.
    pub truth: PathBuf,
    /// Per (query, metric) rows.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
    /// Metrics to compare. Default: all.
    #[arg(long = "eval-metric", value_delimiter = ',')]
    pub eval_metrics: Vec<String>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Key-value workload spec. Default: 162 tables.
    #[arg(long)]
    pub workload_spec: Option<PathBuf>,
    #[arg(long)]
    pub sweep: Option<SweepParam>,
    /// Comma separated sweep values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// LSH against brute-force neighbour search.
    #[arg(long)]
    pub speedup: bool,
    /// Adaptivity against single-shot JS.
    #[arg(long)]
    pub latency: bool,
    /// Empirical band of JS / squared Hellinger over random pairs.
    #[arg(long)]
    pub hellinger: bool,
    #[arg(long, default_value_t = 0.1)]
    pub t_js: f64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub registry: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub workload_spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FITSEARCH_REGISTRY")]
    pub registry: PathBuf,
    #[arg(long, env = "FITSEARCH_HOST", default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, env = "FITSEARCH_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Start from an empty registry when the file does not exist.
    #[arg(long)]
    pub create: bool,
    #[arg(long, default_value_t = DEFAULT_ASYNC_PARTITIONS)]
    pub async_partitions: usize,
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long, default_value_t = 32)]
    pub bins: u32,
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Sketch(a) => cmd_sketch(a, out),
        Command::Register(a) => cmd_register(a, out),
        Command::Query(a) => cmd_query(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, cli.seed, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn cmd_sketch(a: SketchArgs, out: &mut dyn Write) -> Result<()> {
    let id = match a.dataset_id {
        Some(id) => id,
        None => a
            .csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Invalid("cannot derive a dataset id from the CSV path".into()))?,
    };
    let opts = IngestOptions {
        partition_size: a.partition_size,
        bins_per_numeric_feature: a.bins,
        drop_residue: a.drop_residue,
        exclude: a.exclude,
        ..Default::default()
    };
    let sketch = sketch_csv_file(&id, &a.csv, a.schema.as_deref(), &opts)
        .map_err(|e| match e {
            Error::Io(io) => Error::Ingest(format!("{}: {io}", a.csv.display())),
            other => other,
        })?;
    sketch.save(&a.out)?;
    writeln!(
        out,
        "dataset {}: {} rows, {} partitions, {} features",
        sketch.dataset_id,
        sketch.total_rows,
        sketch.num_partitions(),
        sketch.descriptors.len()
    )?;
    Ok(())
}

fn load_registry(path: &Path) -> Result<Registry> {
    if !path.exists() {
        return Err(Error::NotFound(format!("registry {}", path.display())));
    }
    Registry::load(path)
}

fn cmd_register(a: RegisterArgs, out: &mut dyn Write) -> Result<()> {
    let sketch = DatasetSketch::load(&a.sketch)?;
    let mut reg = if a.create && !a.registry.exists() {
        Registry::new(a.params.registry_params(sketch.bins_per_numeric_feature))?
    } else {
        load_registry(&a.registry)?
    };
    let mut record = ModelRecord::new(a.model_id, sketch.dataset_id.clone());
    if let Some(name) = a.name {
        record.display_name = name;
    }
    record.task_tag = a.task_tag;
    record.source_accuracy = a.source_accuracy;
    record.notes = a.notes;
    let receipt = reg.register(record, sketch)?;
    reg.save(&a.registry)?;
    writeln!(
        out,
        "registered {} ({} features, {} partitions, {} postings); manifest version {}",
        receipt.model_id, receipt.num_features, receipt.num_partitions, receipt.postings, receipt.manifest_version
    )?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn print_results(resp: &SearchResponse, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "manifest version {}, metric {}", resp.manifest_version, resp.config.metric)?;
    if resp.results.is_empty() {
        writeln!(out, "no models matched")?;
        return Ok(());
    }
    writeln!(out, "{:>4}  {:<32} {:>8} {:>10} {:>12}", "rank", "model_id", "overlap", "score", "exact_score")?;
    for (i, r) in resp.results.iter().enumerate() {
        writeln!(
            out,
            "{:>4}  {:<32} {:>8.4} {:>10.6} {:>12}",
            i + 1,
            r.model_id,
            r.overlap_ratio,
            r.score,
            fmt_opt(r.exact_score)
        )?;
    }
    Ok(())
}

fn cmd_query(a: QueryArgs, out: &mut dyn Write) -> Result<()> {
    let reg = load_registry(&a.registry)?;
    let query = DatasetSketch::load(&a.sketch)?;
    let resp = SearchResponse::run(&query, &reg, &a.search.config())?;
    print_results(&resp, out)?;
    if let Some(path) = a.out {
        resp.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    Ok(())
}

fn parse_eval_metric(s: &str) -> Result<EvalMetric> {
    EvalMetric::ALL
        .iter()
        .copied()
        .find(|m| m.name() == s.trim())
        .ok_or_else(|| Error::Invalid(format!("unknown evaluation metric `{s}`")))
}

fn load_query_dir(dir: &Path) -> Result<Vec<DatasetSketch>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no *.json sketches in {}", dir.display())));
    }
    paths.iter().map(|p| DatasetSketch::load(p)).collect()
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let reg = load_registry(&a.registry)?;
    let queries = load_query_dir(&a.queries)?;
    let truth = AccuracyTable::load(&a.truth)?;
    let metrics = if a.eval_metrics.is_empty() {
        EvalMetric::ALL.to_vec()
    } else {
        a.eval_metrics.iter().map(|m| parse_eval_metric(m)).collect::<Result<_>>()?
    };
    let config = CompareConfig { search: a.search.config(), metrics };
    config.search.validate()?;
    let report = compare_metrics(&reg, &queries, &truth, &config)?;
    report.write_rows_csv(std::fs::File::create(&a.out)?)?;
    if let Some(p) = &a.summary_out {
        report.write_summary_csv(std::fs::File::create(p)?)?;
    }
    writeln!(out, "{} queries, {} report rows", queries.len(), report.rows.len())?;
    writeln!(out, "{:<16} {:>12} {:>10} {:>10}", "metric", "pearson", "top1_err", "top2_err")?;
    for s in &report.summary {
        writeln!(
            out,
            "{:<16} {:>12} {:>10.4} {:>10.4}",
            s.metric.name(),
            fmt_opt(s.mean_pearson),
            s.top1_error,
            s.top2_error
        )?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let spec = match &a.workload_spec {
        Some(p) => SyntheticWorkloadSpec::load(p)?,
        None => table_workload(),
    };
    let mut params = JsLshParams::default();
    if let Some(s) = seed {
        params.master_seed = s;
    }
    if a.sweep.is_none() && !a.speedup && !a.latency && !a.hellinger {
        return Err(Error::Invalid("bench needs --sweep, --speedup, --latency or --hellinger".into()));
    }
    let mut sink: Option<Box<dyn Write>> = match &a.out {
        Some(p) => Some(Box::new(std::io::BufWriter::new(std::fs::File::create(p)?))),
        None => None,
    };
    if let Some(param) = a.sweep {
        let values = if a.values.is_empty() { param.default_values() } else { a.values.clone() };
        let pts = sweep(&spec, param, &values, &params, a.t_js)?;
        writeln!(out, "{:>8} {:>10} {:>10} {:>10} {:>10}", param.to_string(), "precision", "recall", "lsh_pairs", "exact")?;
        for p in &pts {
            writeln!(out, "{:>8} {:>10.4} {:>10.4} {:>10} {:>10}", p.value, p.precision, p.recall, p.lsh_pairs, p.exact_pairs)?;
        }
        if let Some(w) = sink.as_mut() {
            write_jsonl(w, "sweep", &pts)?;
        }
    }
    if a.speedup {
        let r = speedup(&spec, &params, a.t_js, a.repeats)?;
        writeln!(
            out,
            "speedup over {} tables: exact {:.4}s, lsh {:.4}s, {:.2}x (precision {:.4}, recall {:.4})",
            r.tables, r.exact_secs, r.lsh_secs, r.speedup, r.quality.precision, r.quality.recall
        )?;
        if let Some(w) = sink.as_mut() {
            write_jsonl(w, "speedup", &[r])?;
        }
    }
    if a.latency {
        let reg_params = RegistryParams {
            jslsh: params,
            bins_per_numeric_feature: spec.bins as u32,
            ..Default::default()
        };
        let r = latency_profile(&spec, &reg_params, a.repeats)?;
        writeln!(
            out,
            "latency over {} queries: adaptivity {:.4}s, js {:.4}s, overhead {:.2}x",
            r.queries, r.adaptivity_secs, r.js_secs, r.overhead
        )?;
        if let Some(w) = sink.as_mut() {
            write_jsonl(w, "latency", &[r])?;
        }
    }
    if a.hellinger {
        let b = hellinger_ratio_band(10_000, seed.unwrap_or(1))?;
        writeln!(
            out,
            "JS / H^2 over {} pairs: min {:.4}, mean {:.4}, max {:.4}",
            b.pairs, b.min, b.mean, b.max
        )?;
        if let Some(w) = sink.as_mut() {
            write_jsonl(w, "hellinger_ratio", &[b])?;
        }
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let reg = load_registry(&a.registry)?;
    if let Some(id) = &a.model {
        let m = reg.get(id).ok_or_else(|| Error::NotFound(format!("model `{id}`")))?;
        let v = serde_json::json!({
            "record": m.record,
            "num_features": m.sketch.descriptors.len(),
            "num_partitions": m.sketch.num_partitions(),
            "features": m.sketch.descriptors.iter().map(|d| &d.name).collect::<Vec<_>>(),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).map_err(|e| Error::Invalid(e.to_string()))?)?;
        return Ok(());
    }
    if a.json {
        let v = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "manifest_version": reg.manifest_version(),
            "params": reg.params(),
            "models": reg.records(),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).map_err(|e| Error::Invalid(e.to_string()))?)?;
        return Ok(());
    }
    let p = reg.params();
    writeln!(out, "format version {FORMAT_VERSION}, manifest version {}, {} models", reg.manifest_version(), reg.len())?;
    writeln!(
        out,
        "minhash K={} L={}; jslsh K={} L={} r={}; bins {}",
        p.minhash.k_per_band, p.minhash.num_bands, p.jslsh.k_per_band, p.jslsh.num_bands, p.jslsh.r, p.bins_per_numeric_feature
    )?;
    for m in reg.models() {
        writeln!(
            out,
            "{:<32} dataset={} features={} partitions={} source_accuracy={}",
            m.record.model_id,
            m.record.dataset_id,
            m.sketch.descriptors.len(),
            m.sketch.num_partitions(),
            fmt_opt(m.record.source_accuracy)
        )?;
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let spec = match &a.workload_spec {
        Some(p) => SyntheticWorkloadSpec::load(p)?,
        None => SyntheticWorkloadSpec::default(),
    };
    let w = generate_workload(&spec)?;
    let tables = a.out_dir.join("tables");
    let sketches = a.out_dir.join("sketches");
    std::fs::create_dir_all(&tables)?;
    std::fs::create_dir_all(&sketches)?;
    let names = spec.feature_names();
    for (d, s) in w.datasets.iter().zip(w.sketches()?) {
        d.write_csv(&names, std::fs::File::create(tables.join(format!("{}.csv", d.dataset_id)))?)?;
        s.save(&sketches.join(format!("{}.json", d.dataset_id)))?;
    }
    w.truth.save(&a.out_dir.join("truth.csv"))?;
    std::fs::write(a.out_dir.join("workload.toml"), spec.to_toml_string())?;
    let schema: String = spec
        .schema()
        .iter()
        .map(|e| {
            let (lo, hi) = e.range.unwrap_or((0.0, 1.0));
            format!("{},numeric,{lo},{hi}\n", e.name)
        })
        .collect();
    std::fs::write(a.out_dir.join("schema.csv"), schema)?;
    let meta = serde_json::json!({
        "datasets": w.datasets.iter().map(|d| &d.dataset_id).collect::<Vec<_>>(),
        "models": w.datasets.iter().map(|d| model_id_for(&d.dataset_id)).collect::<Vec<_>>(),
        "truth_proxy": TRUTH_PROXY_DESCRIPTION,
    });
    std::fs::write(
        a.out_dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Invalid(e.to_string()))?,
    )?;
    writeln!(out, "wrote {} datasets to {}", w.datasets.len(), a.out_dir.display())?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let registry = if a.create && !a.registry.exists() {
        let reg = Registry::new(a.params.registry_params(a.bins))?;
        reg.save(&a.registry)?;
        reg
    } else {
        load_registry(&a.registry)?
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .try_init();
    let state = AppState::new(
        registry,
        ServiceConfig { registry_path: Some(a.registry.clone()), async_partitions: a.async_partitions },
    );
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(fitsearch_service::serve(SocketAddr::new(a.host, a.port), state))?;
    Ok(())
}
