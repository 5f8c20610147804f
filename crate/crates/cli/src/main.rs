// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use spectral_scope::forensics::{
    classify_smoothness, classify_strategy, diagnose_language, StrategySignature, ThresholdConfig,
};
use spectral_scope::intervention::{
    ablation_curve_with_ranking, bundle_head_importance, layer_heads_of, steering_vector,
    AblationConfig, AblationCurve, AblationMode, GradientOptions, GradientSpace, HeadImportance,
    NormKind, SteeringOptions,
};
use spectral_scope::report::{
    analyze_bundle, metrics_csv, regime_report, render_dat, sample_dat_file_name, stress_csv,
    stress_dat_files, to_json, write_text, ConfigEcho, ProbeSet, ReportDocument,
};
use spectral_scope::stats::{FdrScope, ResamplingConfig};
use spectral_scope::stress::correct_globally;
use spectral_scope::{
    load_bundle, stress_table, Aggregation, AnalysisConfig, CaptureBundle, Error, LaplacianVariant,
    LayerMetrics, LayerWindow, LoadOptions, Metric, Result, StressTable, TOOL_VERSION,
};

#[derive(Parser, Debug)]
#[command(name = "spectral-scope", version, about = "Spectral diagnostics for attention capture bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Capture bundle directory.
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = AggArg::Mass)]
    agg: AggArg,

    #[arg(long, global = true, value_enum, default_value_t = LaplacianArg::Comb)]
    laplacian: LaplacianArg,

    /// Inclusive 1-based layer window.
    #[arg(long, global = true, default_value = "2:5")]
    window: LayerWindow,

    /// Metrics to report; defaults to every metric the bundle supports.
    #[arg(long = "metric", global = true, num_args = 1..)]
    metrics: Vec<Metric>,

    #[arg(long, global = true, env = "SPECTRAL_SCOPE_SEED", default_value_t = 0)]
    seed: u64,

    /// Output file, or directory when several artifacts are produced.
    /// Stdout when absent and there is a single artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long = "format", global = true, value_enum, num_args = 1.., default_values_t = [Format::Json])]
    formats: Vec<Format>,

    /// Threshold JSON; the frozen set is used when absent.
    #[arg(long, global = true)]
    thresholds: Option<PathBuf>,

    /// Require attention rows to sum to 1 within 1e-6 instead of 1e-3.
    #[arg(long, global = true)]
    strict_stochastic: bool,

    #[arg(long, global = true, default_value_t = 2000)]
    n_bootstrap: usize,

    #[arg(long, global = true, default_value_t = 10_000)]
    n_permutations: usize,

    #[arg(long, global = true, default_value_t = 0.05)]
    fdr_q: f64,

    /// Run BH across every table instead of per metric.
    #[arg(long, global = true)]
    global_fdr: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer metrics of every sample.
    Analyze,
    /// Paired stress deltas and per-cell statistics.
    Stress,
    /// Regime, strategy and entropy labels, from a bundle or explicit values.
    Classify(ClassifyArgs),
    /// Head importance and ablation curves at one layer.
    Ablate(AblateArgs),
    /// Steering vector file for the extractor.
    SteerVector(SteerArgs),
    /// Consolidated report document.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct ClassifyArgs {
    /// Layer-2 smoothness S.
    #[arg(long, allow_negative_numbers = true)]
    smoothness: Option<f64>,
    /// Strategy signature: baseline λ₂, Δλ₂, ΔHFER, ΔEntropy.
    #[arg(long, num_args = 4, value_names = ["BASE", "DL2", "DHFER", "DENT"], allow_negative_numbers = true)]
    signature: Option<Vec<f64>>,
    #[arg(long, requires = "entropy")]
    lambda2: Option<f64>,
    #[arg(long, requires = "lambda2")]
    entropy: Option<f64>,
    /// Treat the `--lambda2/--entropy` pair as the model's reference language.
    #[arg(long)]
    reference: bool,
    /// Reference language for bundle-based classification.
    #[arg(long, default_value = "en")]
    language: String,
}

#[derive(clap::Args, Debug)]
struct AblateArgs {
    /// 1-based layer.
    #[arg(long)]
    layer: usize,
    /// Samples to score; all samples when absent.
    #[arg(long, num_args = 1..)]
    samples: Vec<String>,
    /// Head counts to remove; 0..H-1 when absent.
    #[arg(long, num_args = 1..)]
    k: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = SpaceArg::Logits)]
    space: SpaceArg,
    #[arg(long, value_enum, default_value_t = NormArg::Fro)]
    norm: NormArg,
    #[arg(long)]
    differentiate_mass: bool,
}

#[derive(clap::Args, Debug)]
struct SteerArgs {
    /// 1-based layer.
    #[arg(long)]
    layer: usize,
    /// Calibration pair ids; every pair when absent.
    #[arg(long, num_args = 1..)]
    pairs: Vec<String>,
    #[arg(long)]
    exclude_first_token: bool,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Adds head importance and ablation curves at this layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "en")]
    language: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Mass,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LaplacianArg {
    Comb,
    Rw,
    Sym,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Format {
    Dat,
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SpaceArg {
    Logits,
    Attention,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Fro,
    Spectral,
}

type Artifact = (String, Vec<u8>);

impl Cli {
    fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            aggregation: match self.agg {
                AggArg::Mass => Aggregation::MassWeighted,
                AggArg::Uniform => Aggregation::Uniform,
            },
            laplacian: match self.laplacian {
                LaplacianArg::Comb => LaplacianVariant::Combinatorial,
                LaplacianArg::Rw => LaplacianVariant::RandomWalk,
                LaplacianArg::Sym => LaplacianVariant::Symmetric,
            },
            ..Default::default()
        }
    }

    fn resampling(&self) -> Result<ResamplingConfig> {
        let cfg = ResamplingConfig {
            n_bootstrap: self.n_bootstrap,
            n_permutations: self.n_permutations,
            fdr_q: self.fdr_q,
            seed: self.seed,
            fdr_scope: if self.global_fdr { FdrScope::Global } else { FdrScope::PerModel },
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn thresholds(&self) -> Result<ThresholdConfig> {
        match &self.thresholds {
            Some(p) => ThresholdConfig::load(p),
            None => Ok(ThresholdConfig::frozen()),
        }
    }

    fn load(&self) -> Result<CaptureBundle> {
        let dir = self
            .bundle
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("--bundle is required".into()))?;
        let options = if self.strict_stochastic { LoadOptions::strict() } else { LoadOptions::default() };
        load_bundle(dir, options)
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn metrics_for(&self, bundle: &CaptureBundle) -> Result<Vec<Metric>> {
        let has_hidden = bundle.samples().iter().all(|s| s.hidden.is_some());
        if self.metrics.is_empty() {
            if !has_hidden {
                log::warn!("bundle lacks hidden states; signal metrics skipped");
            }
            return Ok(Metric::ALL.into_iter().filter(|m| has_hidden || !m.needs_hidden()).collect());
        }
        if let Some(m) = self.metrics.iter().find(|m| m.needs_hidden() && !has_hidden) {
            return Err(Error::InvalidInput(format!("metric {m} needs hidden states the bundle lacks")));
        }
        let mut ms = self.metrics.clone();
        ms.sort();
        ms.dedup();
        Ok(ms)
    }

    fn echo(&self, metrics: &[Metric]) -> Result<ConfigEcho> {
        Ok(ConfigEcho {
            bundle: self.bundle.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            analysis: self.analysis(),
            window: self.window,
            metrics: metrics.to_vec(),
            resampling: self.resampling()?,
        })
    }
}

fn json_artifact<T: Serialize>(name: &str, value: &T) -> Result<Artifact> {
    Ok((name.to_string(), to_json(value)?.into_bytes()))
}

fn stress_tables(cli: &Cli, bundle: &CaptureBundle, metrics: &[Metric]) -> Result<Vec<StressTable>> {
    let cfg = cli.resampling()?;
    let analysis = cli.analysis();
    let mut tables = metrics
        .iter()
        .map(|&m| stress_table(bundle, m, &analysis, cli.window, &cfg))
        .collect::<Result<Vec<_>>>()?;
    if cfg.fdr_scope == FdrScope::Global {
        correct_globally(&mut tables, cfg.fdr_q)?;
    }
    Ok(tables)
}

fn analyze_dat(
    model: &str,
    samples: &BTreeMap<String, Vec<LayerMetrics>>,
    metrics: &[Metric],
) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for (id, layers) in samples {
        for &m in metrics {
            let Some(series) = layers.iter().map(|l| m.value(l)).collect::<Option<Vec<f64>>>() else {
                continue;
            };
            let header = vec![format!("model {model}"), format!("sample {id} metric {m}")];
            out.push((sample_dat_file_name(model, id, m), render_dat(&series, &header)?.into_bytes()));
        }
    }
    Ok(out)
}

fn stress_dat(tables: &[StressTable]) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for t in tables {
        for (name, text) in stress_dat_files(t)? {
            out.push((name, text.into_bytes()));
        }
    }
    Ok(out)
}

fn run_analyze(cli: &Cli) -> Result<Vec<Artifact>> {
    let bundle = cli.load()?;
    let metrics = cli.metrics_for(&bundle)?;
    let samples = analyze_bundle(&bundle, &cli.analysis())?;
    let mut out = Vec::new();
    if cli.wants(Format::Json) {
        let doc = json!({
            "tool_version": TOOL_VERSION,
            "model_id": bundle.model_id(),
            "config": cli.echo(&metrics)?,
            "samples": samples,
        });
        out.push(json_artifact("analyze.json", &doc)?);
    }
    if cli.wants(Format::Csv) {
        out.push(("analyze.csv".into(), metrics_csv(&samples)?.into_bytes()));
    }
    if cli.wants(Format::Dat) {
        out.extend(analyze_dat(bundle.model_id(), &samples, &metrics)?);
    }
    Ok(out)
}

fn run_stress(cli: &Cli) -> Result<Vec<Artifact>> {
    let bundle = cli.load()?;
    let metrics = cli.metrics_for(&bundle)?;
    let tables = stress_tables(cli, &bundle, &metrics)?;
    let mut out = Vec::new();
    if cli.wants(Format::Json) {
        let doc = json!({
            "tool_version": TOOL_VERSION,
            "model_id": bundle.model_id(),
            "config": cli.echo(&metrics)?,
            "stress": tables,
        });
        out.push(json_artifact("stress.json", &doc)?);
    }
    if cli.wants(Format::Csv) {
        out.push(("stress.csv".into(), stress_csv(&tables)?.into_bytes()));
    }
    if cli.wants(Format::Dat) {
        out.extend(stress_dat(&tables)?);
    }
    Ok(out)
}

fn run_classify(cli: &Cli, args: &ClassifyArgs) -> Result<Vec<Artifact>> {
    let thresholds = cli.thresholds()?;
    let mut doc = serde_json::Map::new();
    doc.insert("tool_version".into(), json!(TOOL_VERSION));
    doc.insert("threshold_version".into(), json!(thresholds.version));
    if let Some(s) = args.smoothness {
        let regime = classify_smoothness(s, &thresholds.regime_rule())?;
        doc.insert("regime".into(), json!({ "smoothness": s, "label": regime }));
    }
    if let Some(v) = &args.signature {
        let sig = StrategySignature {
            lambda2_en_baseline: v[0],
            delta_lambda2: v[1],
            delta_hfer: v[2],
            delta_entropy: v[3],
        };
        let label = classify_strategy(&sig, &thresholds.strategy);
        doc.insert("strategy".into(), json!({ "signature": sig, "label": label }));
    }
    if let (Some(l2), Some(h)) = (args.lambda2, args.entropy) {
        let d = diagnose_language(l2, h, args.reference, &thresholds.entropy)?;
        doc.insert("entropy".into(), json!(d));
    }
    if cli.bundle.is_some() {
        let bundle = cli.load()?;
        let samples = analyze_bundle(&bundle, &cli.analysis())?;
        let probe = ProbeSet { reference_language: args.language.clone(), ..Default::default() };
        let report = regime_report(&bundle, &samples, cli.window, &thresholds, &probe)?;
        doc.insert("model_id".into(), json!(bundle.model_id()));
        doc.insert("bundle".into(), json!(report));
    }
    if doc.len() == 2 {
        return Err(Error::InvalidInput(
            "classify needs --bundle, --smoothness, --signature or --lambda2/--entropy".into(),
        ));
    }
    Ok(vec![json_artifact("classify.json", &doc)?])
}

fn gradient_options(cli: &Cli, args: &AblateArgs) -> GradientOptions {
    GradientOptions {
        aggregation: cli.analysis().aggregation,
        space: match args.space {
            SpaceArg::Logits => GradientSpace::Logits,
            SpaceArg::Attention => GradientSpace::Attention,
        },
        norm: match args.norm {
            NormArg::Fro => NormKind::Frobenius,
            NormArg::Spectral => NormKind::Spectral,
        },
        differentiate_mass: args.differentiate_mass,
        ..Default::default()
    }
}

#[derive(Serialize)]
struct SampleCurve {
    sample: String,
    curve: AblationCurve,
}

fn ablation(
    cli: &Cli,
    bundle: &CaptureBundle,
    layer: usize,
    ids: &[String],
    k: &[usize],
    repeats: usize,
    opts: GradientOptions,
) -> Result<(HeadImportance, Vec<SampleCurve>)> {
    let importance = bundle_head_importance(bundle, ids, layer, &opts)?;
    let ranking = importance.ranking();
    let h = bundle.manifest().num_heads;
    let ks: Vec<usize> = if k.is_empty() { (0..h).collect() } else { k.to_vec() };
    let mut curves = Vec::new();
    for id in ids {
        let heads = layer_heads_of(bundle, id, layer)?;
        let cfg = AblationConfig {
            gradient: opts,
            n_random_repeats: repeats,
            seed: cli.seed,
            stream_label: id.clone(),
        };
        for (mode, rank) in [(AblationMode::Targeted, Some(ranking.clone())), (AblationMode::Random, None)] {
            let curve = ablation_curve_with_ranking(&heads, layer, mode, &ks, rank, &cfg)?;
            curves.push(SampleCurve { sample: id.clone(), curve });
        }
    }
    Ok((importance, curves))
}

fn all_ids(bundle: &CaptureBundle) -> Vec<String> {
    bundle.samples().iter().map(|s| s.record.id.clone()).collect()
}

fn run_ablate(cli: &Cli, args: &AblateArgs) -> Result<Vec<Artifact>> {
    let bundle = cli.load()?;
    let ids = if args.samples.is_empty() { all_ids(&bundle) } else { args.samples.clone() };
    let opts = gradient_options(cli, args);
    let (importance, curves) = ablation(cli, &bundle, args.layer, &ids, &args.k, args.repeats, opts)?;
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "model_id": bundle.model_id(),
        "seed": cli.seed,
        "head_importance": importance,
        "ranking": importance.ranking(),
        "ablation": curves,
    });
    Ok(vec![json_artifact("ablate.json", &doc)?])
}

fn run_steer(cli: &Cli, args: &SteerArgs) -> Result<()> {
    let path = cli
        .out
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("steer-vector needs --out <file>".into()))?;
    let bundle = cli.load()?;
    let opts = SteeringOptions {
        exclude_first_token: args.exclude_first_token,
        hidden_alignment: cli.analysis().hidden_alignment,
    };
    let v = steering_vector(&bundle, args.layer, &args.pairs, &opts)?;
    v.write(path)?;
    let norm = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let summary = json!({
        "path": path.display().to_string(),
        "layer": v.layer,
        "d": v.values.len(),
        "calibration_size": v.calibration_size,
        "alpha_grid": v.alpha_grid,
        "norm": norm,
    });
    print_stdout(to_json(&summary)?.as_bytes())
}

fn run_report(cli: &Cli, args: &ReportArgs) -> Result<Vec<Artifact>> {
    let bundle = cli.load()?;
    let metrics = cli.metrics_for(&bundle)?;
    let thresholds = cli.thresholds()?;
    let samples = analyze_bundle(&bundle, &cli.analysis())?;
    let stress = stress_tables(cli, &bundle, &metrics)?;
    let probe = ProbeSet { reference_language: args.language.clone(), ..Default::default() };
    let regime = regime_report(&bundle, &samples, cli.window, &thresholds, &probe)?;
    let (head_importance, ablation) = match args.layer {
        Some(layer) => {
            let ids = all_ids(&bundle);
            let (imp, curves) = ablation(cli, &bundle, layer, &ids, &[], 20, GradientOptions {
                aggregation: cli.analysis().aggregation,
                ..Default::default()
            })?;
            (Some(imp), curves.into_iter().map(|c| c.curve).collect())
        }
        None => (None, Vec::new()),
    };
    let doc = ReportDocument {
        tool_version: TOOL_VERSION.to_string(),
        threshold_version: thresholds.version.clone(),
        model_id: bundle.model_id().to_string(),
        config: cli.echo(&metrics)?,
        samples,
        stress,
        regime: Some(regime),
        head_importance,
        ablation,
    };
    let mut out = Vec::new();
    if cli.wants(Format::Json) {
        out.push(json_artifact("report.json", &doc)?);
    }
    if cli.wants(Format::Csv) {
        out.push(("stress.csv".into(), stress_csv(&doc.stress)?.into_bytes()));
        out.push(("metrics.csv".into(), metrics_csv(&doc.samples)?.into_bytes()));
    }
    if cli.wants(Format::Dat) {
        out.extend(stress_dat(&doc.stress)?);
    }
    Ok(out)
}

fn print_stdout(bytes: &[u8]) -> Result<()> {
    std::io::stdout()
        .write_all(bytes)
        .map_err(|e| Error::Io { path: PathBuf::from("<stdout>"), source: e })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    match std::str::from_utf8(bytes) {
        Ok(text) => write_text(path, text),
        Err(_) => fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }),
    }
}

/// A single artifact goes to stdout or to `--out` (a file, or into it when
/// it is an existing directory); several need `--out` as a directory.
fn emit(cli: &Cli, artifacts: Vec<Artifact>) -> Result<()> {
    match (artifacts.as_slice(), &cli.out) {
        ([], _) => Err(Error::InvalidInput("no output format selected".into())),
        ([(_, bytes)], None) => print_stdout(bytes),
        ([(name, bytes)], Some(out)) if out.is_dir() => write_bytes(&out.join(name), bytes),
        ([(_, bytes)], Some(out)) => write_bytes(out, bytes),
        (_, None) => Err(Error::InvalidInput(
            "several artifacts requested; pass --out <dir>".into(),
        )),
        (many, Some(dir)) => {
            for (name, bytes) in many {
                write_bytes(&dir.join(name), bytes)?;
            }
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let artifacts = match &cli.command {
        Command::Analyze => run_analyze(cli)?,
        Command::Stress => run_stress(cli)?,
        Command::Classify(a) => run_classify(cli, a)?,
        Command::Ablate(a) => run_ablate(cli, a)?,
        Command::SteerVector(a) => return run_steer(cli, a),
        Command::Report(a) => run_report(cli, a)?,
    };
    emit(cli, artifacts)
}

fn fail(kind: &str, message: String, code: i32) -> ExitCode {
    let body = json!({
        "error": {
            "kind": kind,
            "message": message,
            "exit_code": code,
        }
    });
    eprintln!("{body}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim_end().to_string(), 2),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), e.exit_code()),
    }
}
