//! `dsebm`: synthesize data, train energy models, score, evaluate,
//! gradient-check and inspect energy landscapes.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod settings;
mod svg;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use dsebm::datasets::{self, DataKind, Item, LabeledDataset, Split};
use dsebm::detection::{self, Criterion, ScoreReport, ThresholdMode, Thresholds};
use dsebm::gradcheck::run_gradcheck;
use dsebm::landscape::{evaluate_grid, local_maxima, local_minima};
use dsebm::persistence;
use dsebm::training::Normalization;
use dsebm::{fit_detector, Architecture, Detector, DsebmError, LayerSpec, ModelSpec, TrainConfig};

use settings::{env_key, Settings};

#[derive(Parser)]
#[command(name = "dsebm", version, about = "Energy-based anomaly detection")]
struct Cli {
    /// Settings file of key=value lines; flags override it, and it
    /// overrides DSEBM_* environment variables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for training and scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Train a model on inlier data.
    Train(TrainArgs),
    /// Score samples by energy and reconstruction error.
    Score(ScoreArgs),
    /// Precision, recall and F1 of both criteria.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate a 1-D or 2-D model on a grid.
    Landscape(LandscapeArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Landscape(_) => "landscape",
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// gaussians, bimodal, sequences or images.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Dimension (gaussians, sequences).
    #[arg(long)]
    d: Option<usize>,
    /// Outlier shift (gaussians).
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Image side length.
    #[arg(long)]
    size: Option<usize>,
    /// Write every item here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Contamination ratio; with it, write a train/test split instead.
    #[arg(long)]
    rho: Option<f64>,
    /// Fraction of inliers used for training.
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    inlier_classes: Option<String>,
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// dense, recurrent or conv.
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train only on these comma-separated labels.
    #[arg(long)]
    inlier_classes: Option<String>,
    /// Hidden widths of a dense model, comma-separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    rnn_hidden: Option<usize>,
    #[arg(long)]
    ebm_hidden: Option<usize>,
    /// Conv stack, e.g. conv:4x3,pool:2,dense:16.
    #[arg(long)]
    layers: Option<String>,
    /// Corruption noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// zscore or none.
    #[arg(long)]
    normalization: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch trace; defaults to <out>.trace.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fail unless the model has this architecture.
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fill in ground truth: labels outside this set are outliers.
    #[arg(long)]
    inlier_classes: Option<String>,
    /// Set thresholds at the (1 - rho)-quantile of the scores.
    #[arg(long)]
    rho: Option<f64>,
    /// Report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score report to evaluate.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fail unless the model has this architecture.
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    inlier_classes: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    /// quantile or best-f1.
    #[arg(long)]
    mode: Option<String>,
    /// Summary path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threshold sweep CSV.
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per architecture.
    #[arg(long)]
    instances: Option<usize>,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Lower grid corner, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<String>,
    /// Upper grid corner, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<String>,
    /// Points per axis, endpoints included.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    energy_threshold: Option<f64>,
    #[arg(long)]
    recon_threshold: Option<f64>,
    /// Take thresholds from a score report.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Grid CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Missing(String),
    Data(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Missing(k) => write!(
                f,
                "missing required setting {k:?} (flag --{k}, config key {k}, or {})",
                env_key(k)
            ),
        }
    }
}

impl From<DsebmError> for CliError {
    fn from(e: DsebmError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, DsebmError::InvalidArgument(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CliError::Usage(_) | CliError::Missing(_) => {
                    let mut cmd = Cli::command();
                    cmd.build();
                    if let Some(sub) = cmd.find_subcommand_mut(name) {
                        eprintln!("{}", sub.render_usage());
                    }
                    1
                }
                CliError::Data(_) => 2,
                CliError::Numerical(_) => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let s = Settings::load(cli.config.as_deref())?;
    if let Some(n) = s.opt("threads", cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&s, a),
        Command::Train(a) => cmd_train(&s, a),
        Command::Score(a) => cmd_score(&s, a),
        Command::Eval(a) => cmd_eval(&s, a),
        Command::Gradcheck(a) => cmd_gradcheck(&s, a),
        Command::Landscape(a) => cmd_landscape(&s, a),
    }
}

fn class_set(text: &str) -> BTreeSet<String> {
    text.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}

fn write_or_print(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn cmd_synth(s: &Settings, a: SynthArgs) -> CliResult {
    let kind = s.or("kind", a.kind, "gaussians".to_string())?;
    let n = s.or("n", a.n, 2000)?;
    let seed = s.or("seed", a.seed, 0)?;
    let ds = match kind.as_str() {
        "gaussians" => {
            let d = s.or("d", a.d, 2)?;
            datasets::synth_gaussians(n, d, s.or("separation", a.separation, 6.0)?, seed)?
        }
        "bimodal" => datasets::synth_bimodal_1d(n, seed)?,
        "sequences" => {
            let d = s.or("d", a.d, 2)?;
            let lo = s.or("min-len", a.min_len, 4)?;
            let hi = s.or("max-len", a.max_len, 12)?;
            datasets::synth_sequences(n, d, lo, hi, seed)?
        }
        "images" => datasets::synth_images(n, s.or("size", a.size, 8)?, seed)?,
        other => return Err(CliError::Usage(format!("unknown synthetic kind {other:?}"))),
    };
    let mut written = serde_json::Map::new();
    match s.opt("rho", a.rho)? {
        Some(rho) => {
            let ratio = s.or("split-ratio", a.split_ratio, 0.5)?;
            let classes = class_set(&s.or("inlier-classes", a.inlier_classes, datasets::INLIER_LABEL.into())?);
            let train_out = s.out_path("train-out", a.train_out)?.ok_or(CliError::Missing("train-out".into()))?;
            let test_out = s.out_path("test-out", a.test_out)?.ok_or(CliError::Missing("test-out".into()))?;
            let split = datasets::make_contaminated(&ds, &classes, rho, ratio, seed)?;
            for (split_kind, path, key) in [(Split::Train, &train_out, "train"), (Split::Test, &test_out, "test")] {
                let items: Vec<&Item> = split.split(split_kind).collect();
                datasets::write_items(&items, path)?;
                written.insert(key.into(), json!(items.len()));
            }
        }
        None => {
            let out = s.out_path("out", a.out)?.ok_or(CliError::Missing("out".into()))?;
            let items: Vec<&Item> = ds.items.iter().collect();
            datasets::write_items(&items, &out)?;
            written.insert("all".into(), json!(items.len()));
        }
    }
    print!("{}", to_json(&json!({ "items": written, "config": s.effective() })));
    Ok(())
}

fn kind_for(arch: Architecture) -> DataKind {
    match arch {
        Architecture::Dense => DataKind::Static,
        Architecture::Recurrent => DataKind::Sequence,
        Architecture::Conv => DataKind::Image,
    }
}

fn parse_widths(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::Usage(format!("invalid width {w:?}")))
        })
        .collect()
}

fn parse_layers(text: &str) -> CliResult<Vec<LayerSpec>> {
    let bad = || CliError::Usage(format!("invalid layer list {text:?}; expected e.g. conv:4x3,pool:2,dense:16"));
    text.split(',')
        .map(|part| {
            let (kind, arg) = part.trim().split_once(':').ok_or_else(bad)?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            Ok(match kind {
                "conv" => {
                    let (f, k) = arg.split_once('x').ok_or_else(bad)?;
                    LayerSpec::Conv {
                        filters: num(f)?,
                        size: num(k)?,
                    }
                }
                "pool" => LayerSpec::Pool { window: num(arg)? },
                "dense" => LayerSpec::Dense { units: num(arg)? },
                _ => return Err(bad()),
            })
        })
        .collect()
}

fn cmd_train(s: &Settings, a: TrainArgs) -> CliResult {
    let arch: Architecture = s.require("arch", a.arch)?;
    let data = s.require_path("data", a.data)?;
    let out = s.out_path("out", a.out)?.ok_or(CliError::Missing("out".into()))?;
    let trace_path = s
        .out_path("trace", a.trace)?
        .unwrap_or_else(|| PathBuf::from(format!("{}.trace.csv", out.display())));
    let spec = match arch {
        Architecture::Dense => ModelSpec::Dense {
            hidden: parse_widths(&s.or("hidden", a.hidden, "16".into())?)?,
        },
        Architecture::Recurrent => ModelSpec::Recurrent {
            rnn_hidden: s.or("rnn-hidden", a.rnn_hidden, 8)?,
            ebm_hidden: s.or("ebm-hidden", a.ebm_hidden, 8)?,
        },
        Architecture::Conv => ModelSpec::Conv {
            layers: parse_layers(&s.or("layers", a.layers, "conv:4x3,dense:16".into())?)?,
        },
    };
    let defaults = TrainConfig::default();
    let normalization: Normalization = s.or("normalization", a.normalization, "zscore".into())?.parse()?;
    let config = TrainConfig {
        noise_sigma: s.or("sigma", a.sigma, defaults.noise_sigma)?,
        batch_size: s.or("batch-size", a.batch_size, defaults.batch_size)?,
        epochs: s.or("epochs", a.epochs, defaults.epochs)?,
        learning_rate: s.or("lr", a.lr, defaults.learning_rate)?,
        momentum: s.or("momentum", a.momentum, defaults.momentum)?,
        seed: s.or("seed", a.seed, defaults.seed)?,
        normalization,
    };
    config.validate()?;
    let ds = datasets::load(&data, kind_for(arch))?;
    let samples: Vec<_> = match s.opt("inlier-classes", a.inlier_classes)? {
        Some(c) => ds.filter_labels(&class_set(&c)).into_iter().map(|i| i.sample.clone()).collect(),
        None => ds.items.iter().map(|i| i.sample.clone()).collect(),
    };
    if samples.is_empty() {
        return Err(CliError::Data("no training samples after filtering".into()));
    }
    let (detector, trace) = fit_detector(&spec, &samples, &config)?;
    persistence::save_model(&detector, &out)?;
    fs::write(&trace_path, format!("{}{}", s.echo_lines(), trace.to_csv()))?;
    println!(
        "trained {arch} model on {} samples: objective {:.6} -> {:.6}; wrote {}",
        samples.len(),
        trace.initial_objective,
        trace.final_objective().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_scored(
    s: &Settings,
    model: Option<PathBuf>,
    arch: Option<Architecture>,
    data: Option<PathBuf>,
    classes: Option<&BTreeSet<String>>,
) -> CliResult<ScoreReport> {
    let model = s.require_path("model", model)?;
    let data = s.require_path("data", data)?;
    let detector: Detector = match s.opt("arch", arch)? {
        Some(a) => persistence::load_model_as(&model, a)?,
        None => persistence::load_model(&model)?,
    };
    let ds: LabeledDataset = datasets::load(&data, kind_for(detector.architecture()))?;
    Ok(detection::score_samples(&detector, &ds.items, classes)?)
}

fn cmd_score(s: &Settings, a: ScoreArgs) -> CliResult {
    let classes = s.opt("inlier-classes", a.inlier_classes)?.map(|c| class_set(&c));
    let out = s.out_path("out", a.out)?;
    let mut report = load_scored(s, a.model, a.arch, a.data, classes.as_ref())?;
    if let Some(rho) = s.opt("rho", a.rho)? {
        report = report.with_quantile_thresholds(rho)?;
    }
    write_or_print(out.as_deref(), &format!("{}{}", s.echo_lines(), report.to_tsv()))
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> CliResult {
    let explicit_classes = s.opt("inlier-classes", a.inlier_classes)?;
    let classes = class_set(explicit_classes.as_deref().unwrap_or(datasets::INLIER_LABEL));
    let mut report = match s.path("scores", a.scores)? {
        Some(p) => {
            let text = fs::read_to_string(&p)?;
            let mut r = ScoreReport::from_tsv(&text)?;
            for e in &mut r.entries {
                if explicit_classes.is_some() || e.outlier.is_none() {
                    e.outlier = Some(!classes.contains(&e.label));
                }
            }
            r
        }
        None => load_scored(s, a.model, a.arch, a.data, Some(&classes))?,
    };
    if report.entries.is_empty() {
        return Err(CliError::Data("no scored samples".into()));
    }
    let mode_name = s.or("mode", a.mode, "quantile".into())?;
    let rho = s.opt("rho", a.rho)?;
    let mode = match (mode_name.as_str(), rho, report.thresholds) {
        ("best-f1", _, _) => ThresholdMode::BestF1,
        ("quantile", Some(r), _) => ThresholdMode::Quantile(r),
        ("quantile", None, Some(th)) => ThresholdMode::Fixed(th),
        ("quantile", None, None) => ThresholdMode::Quantile(s.or("rho", None, 0.2)?),
        (other, _, _) => return Err(CliError::Usage(format!("unknown mode {other:?}"))),
    };
    let eval = detection::evaluate(&report, mode)?;
    report.thresholds = Some(Thresholds {
        energy: eval.energy.metrics.threshold,
        recon_error: eval.recon.metrics.threshold,
    });
    let summary = json!({
        "samples": eval.samples,
        "outliers": eval.outliers,
        "mode": match mode {
            ThresholdMode::Quantile(_) => "quantile",
            ThresholdMode::BestF1 => "best-f1",
            ThresholdMode::Fixed(_) => "fixed",
        },
        "energy": eval.criterion(Criterion::Energy).metrics,
        "recon": eval.criterion(Criterion::Recon).metrics,
        "config": s.effective(),
    });
    if let Some(p) = s.out_path("sweep-out", a.sweep_out)? {
        fs::write(p, format!("{}{}", s.echo_lines(), eval.sweep_csv()))?;
    }
    write_or_print(s.out_path("out", a.out)?.as_deref(), &to_json(&summary))
}

fn cmd_gradcheck(s: &Settings, a: GradcheckArgs) -> CliResult {
    let seed = s.or("seed", a.seed, 0)?;
    let instances = s.or("instances", a.instances, 20)?;
    let report = run_gradcheck(seed, instances)?;
    print!("{}", report.to_table());
    if let Some(p) = s.out_path("out", a.out)? {
        let v = json!({ "report": report, "config": s.effective() });
        fs::write(p, to_json(&v))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical("gradient check failed".into()))
    }
}

fn parse_point(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid coordinate {v:?}")))
        })
        .collect()
}

fn cmd_landscape(s: &Settings, a: LandscapeArgs) -> CliResult {
    let model = s.require_path("model", a.model)?;
    let detector = persistence::load_model(&model)?;
    let dims = match &detector.model {
        dsebm::Model::Dense(p) if p.input_dim() <= 2 => p.input_dim(),
        m => {
            return Err(CliError::Usage(format!(
                "landscapes need a dense model with 1 or 2 inputs, got {}",
                m.architecture()
            )))
        }
    };
    // Default window: four standard deviations around the training mean.
    let (mean, std) = match &detector.normalizer {
        Some(n) => (n.mean.clone(), n.std.clone()),
        None => (vec![0.0; dims], vec![1.0; dims]),
    };
    let fmt_point = |v: Vec<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let lo_default = fmt_point(mean.iter().zip(&std).map(|(m, s)| m - 4.0 * s).collect());
    let hi_default = fmt_point(mean.iter().zip(&std).map(|(m, s)| m + 4.0 * s).collect());
    let lo = parse_point(&s.or("lo", a.lo, lo_default)?)?;
    let hi = parse_point(&s.or("hi", a.hi, hi_default)?)?;
    let resolution = s.or("resolution", a.resolution, 201)?;
    let from_scores = match s.path("scores", a.scores)? {
        Some(p) => ScoreReport::from_tsv(&fs::read_to_string(p)?)?.thresholds,
        None => None,
    };
    let e_th = s.opt("energy-threshold", a.energy_threshold)?.or(from_scores.map(|t| t.energy));
    let r_th = s.opt("recon-threshold", a.recon_threshold)?.or(from_scores.map(|t| t.recon_error));
    let out = s.out_path("out", a.out)?.ok_or(CliError::Missing("out".into()))?;

    let land = evaluate_grid(&detector, &lo, &hi, resolution)?;
    let thresholds = match (e_th, r_th) {
        (None, None) => None,
        (e, r) => Some((e.unwrap_or(f64::NAN), r.unwrap_or(f64::NAN))),
    };
    fs::write(&out, format!("{}{}", s.echo_lines(), land.to_csv(thresholds)))?;
    if let Some(p) = s.out_path("svg", a.svg)? {
        fs::write(p, svg::render(&land, (e_th, r_th), &s.echo_lines()))?;
    }
    if dims == 1 {
        let e = land.energies();
        let at = |idx: Vec<usize>| idx.iter().map(|&i| format!("{:.4}", land.points[i].coords[0])).collect::<Vec<_>>();
        println!("energy minima at {:?}", at(local_minima(&e)));
        println!("energy maxima at {:?}", at(local_maxima(&e)));
    }
    println!("wrote {} grid points to {}", land.points.len(), out.display());
    Ok(())
}
