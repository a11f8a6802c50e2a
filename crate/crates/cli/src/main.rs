//! `graphal`: build similarity graphs, compute spectra, run active-learning
//! simulations, and serve labeling sessions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graphal_core::active::AcquisitionKind;
use graphal_core::data::{load_features, load_labels, sar_to_3channel, save_features, FeatureFormat};
use graphal_core::graph::{build_graph, GraphConfig, Kernel, LaplacianKind, Metric, DEFAULT_K};
use graphal_core::session::Split;
use graphal_core::sim::{plot_json, run_on_graph, ExperimentConfig, SynthKind, SynthSpec};
use graphal_core::spectral::{cached_spectrum, graph_spectrum, SpectralData, SpectralOptions, DEFAULT_M, DEFAULT_TOL};
use graphal_core::ssl::DEFAULT_GAMMA;
use graphal_core::{ActiveSession, Error, ErrorClass, SarImagePair, SimilarityGraph};
use graphal_service::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "graphal", version, about = "Graph-based semi-supervised learning and sequential active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a self-tuning k-NN similarity graph from a feature file.
    BuildGraph(BuildGraphArgs),
    /// Compute the smallest Laplacian eigenpairs of a graph.
    Spectrum(SpectrumArgs),
    /// Run oracle-driven active-learning experiments and write accuracy curves.
    Simulate(SimulateArgs),
    /// Serve labeling sessions over HTTP.
    Serve(ServeArgs),
    /// Convert SAR magnitude and phase images to three-channel features.
    TransformSar(TransformSarArgs),
    /// Export predictions, history, or the node function of a session.
    Export(ExportArgs),
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Angular,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Angular => Metric::Angular,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LaplacianArg {
    Unnormalized,
    Normalized,
    RandomWalk,
}

impl From<LaplacianArg> for LaplacianKind {
    fn from(l: LaplacianArg) -> Self {
        match l {
            LaplacianArg::Unnormalized => LaplacianKind::Unnormalized,
            LaplacianArg::Normalized => LaplacianKind::SymmetricNormalized,
            LaplacianArg::RandomWalk => LaplacianKind::RandomWalk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AcquisitionArg {
    Random,
    Uncertainty,
    Vopt,
    Mc,
    Mcvopt,
}

impl From<AcquisitionArg> for AcquisitionKind {
    fn from(a: AcquisitionArg) -> Self {
        match a {
            AcquisitionArg::Random => AcquisitionKind::Random,
            AcquisitionArg::Uncertainty => AcquisitionKind::Uncertainty,
            AcquisitionArg::Vopt => AcquisitionKind::Vopt,
            AcquisitionArg::Mc => AcquisitionKind::Mc,
            AcquisitionArg::Mcvopt => AcquisitionKind::Mcvopt,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

impl From<FormatArg> for FeatureFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => FeatureFormat::Csv,
            FormatArg::Binary => FeatureFormat::Binary,
        }
    }
}

#[derive(Debug, Args)]
struct GraphFlags {
    /// Neighbors per node.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value = "angular")]
    metric: MetricArg,
    /// `self-tuning`, or a positive number for a global Gaussian bandwidth.
    #[arg(long, default_value = "self-tuning", value_parser = parse_kernel)]
    kernel: Kernel,
}

impl GraphFlags {
    fn config(&self) -> GraphConfig {
        GraphConfig {
            k: self.k,
            metric: self.metric.into(),
            kernel: self.kernel,
        }
    }
}

fn parse_kernel(s: &str) -> std::result::Result<Kernel, String> {
    if s == "self-tuning" {
        return Ok(Kernel::SelfTuning);
    }
    match s.parse::<f64>() {
        Ok(sigma) if sigma.is_finite() && sigma > 0.0 => Ok(Kernel::GlobalSigma(sigma)),
        _ => Err(format!("expected `self-tuning` or a positive bandwidth, got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct BuildGraphArgs {
    /// Feature file: `.csv`, otherwise the binary format.
    #[arg(long)]
    features: PathBuf,
    /// Override the format inferred from the extension.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[command(flatten)]
    graph: GraphFlags,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "unnormalized")]
    laplacian: LaplacianArg,
    /// Number of eigenpairs.
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    /// Residual tolerance per eigenpair.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output spectrum file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Prebuilt graph file.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    graph: Option<PathBuf>,
    /// Feature file; the graph is built with --k and --metric.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Ground-truth labels, `index,label` per line.
    #[arg(long)]
    labels: PathBuf,
    /// Acquisition functions to run, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "uncertainty")]
    acquisition: Vec<AcquisitionArg>,
    /// Queries per trial.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Eigenpairs kept for the covariance.
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value = "angular")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "unnormalized")]
    laplacian: LaplacianArg,
    /// Seed labels drawn per class in each trial.
    #[arg(long, default_value_t = 1)]
    initial_per_class: usize,
    /// Base seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/test split file, `index,train|test` per line.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Directory for cached spectra.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads for parallel trials.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for curves, journals and plot data.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Directory holding one subdirectory per session.
    #[arg(long, env = "GRAPHAL_SESSION_ROOT")]
    session_root: PathBuf,
    #[arg(long, env = "GRAPHAL_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
}

#[derive(Debug, Args)]
struct TransformSarArgs {
    /// Magnitude image as a feature file (rows x columns).
    #[arg(long)]
    magnitude: PathBuf,
    /// Phase image in radians, same shape.
    #[arg(long)]
    phase: PathBuf,
    /// Output image with three interleaved channels per pixel.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportKind {
    Predictions,
    History,
    NodeFunction,
    Accuracy,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Session directory.
    #[arg(long)]
    session: PathBuf,
    #[arg(long, value_enum)]
    what: ExportKind,
    /// Output file; standard output when omitted (not for node-function).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKindArg {
    Blobs,
    Moons,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    kind: SynthKindArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Ambient dimension for blobs (defaults to the class count).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 1 for usage errors, 2 for bad or unreadable data, 3 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(core) => match core.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        },
        None => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph(a) => build_graph_cmd(a),
        Command::Spectrum(a) => spectrum_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::TransformSar(a) => transform_sar_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn read_features(path: &Path, format: Option<FormatArg>) -> Result<graphal_core::FeatureMatrix> {
    let format = format.map_or_else(|| FeatureFormat::from_path(path), Into::into);
    Ok(load_features(path, format)?)
}

fn build_graph_cmd(a: BuildGraphArgs) -> Result<()> {
    let x = read_features(&a.features, a.format)?;
    let graph = build_graph(&x, &a.graph.config())?;
    graph.save(&a.out)?;
    println!("n={} nnz={} connected=yes", graph.n(), graph.nnz());
    Ok(())
}

fn spectrum_cmd(a: SpectrumArgs) -> Result<()> {
    let graph = SimilarityGraph::load(&a.graph)?;
    let kind: LaplacianKind = a.laplacian.into();
    let opts = SpectralOptions {
        tol: a.tol,
        seed: a.seed,
        ..SpectralOptions::with_m(a.m)
    };
    let start = Instant::now();
    let spec = graph_spectrum(&graph, kind, &opts)?;
    let residual = spec.max_residual(&graphal_core::graph::laplacian(&graph, kind)?);
    spec.save(&a.out)?;
    println!(
        "n={} m={} lambda_min={:.3e} lambda_max={:.6} max_residual={:.2e} seconds={:.2}",
        spec.n(),
        spec.m(),
        spec.eigenvalues()[0],
        spec.eigenvalues()[spec.m() - 1],
        residual,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    if let Some(jobs) = a.jobs {
        if jobs == 0 {
            return Err(Error::InvalidParameter("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let graph = match (&a.graph, &a.features) {
        (Some(path), _) => {
            let g = SimilarityGraph::load(path)?;
            g.ensure_connected()?;
            g
        }
        (None, Some(path)) => build_graph(
            &read_features(path, None)?,
            &GraphConfig {
                k: a.k,
                metric: a.metric.into(),
                kernel: Kernel::SelfTuning,
            },
        )?,
        (None, None) => unreachable!("clap requires one of --graph and --features"),
    };
    let graph = Arc::new(graph);
    let labels = load_labels(&a.labels, None)?;
    let truth: Vec<usize> = labels
        .dense(graph.n())?
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::InvalidLabels(format!("node {i} has no ground-truth label"))))
        .collect::<graphal_core::Result<_>>()?;
    let split = match &a.split {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(Split::parse(&text)?)
        }
        None => None,
    };
    let kinds: Vec<AcquisitionKind> = {
        let mut seen = Vec::new();
        for k in &a.acquisition {
            let k: AcquisitionKind = (*k).into();
            if !seen.contains(&k) {
                seen.push(k);
            }
        }
        seen
    };
    let laplacian: LaplacianKind = a.laplacian.into();
    let m = a.m.min(graph.n());
    let spectral: Option<Arc<SpectralData>> = if kinds.iter().any(|k| k.needs_covariance()) {
        let opts = SpectralOptions {
            seed: a.seed,
            ..SpectralOptions::with_m(m)
        };
        Some(Arc::new(match &a.cache_dir {
            Some(dir) => cached_spectrum(&graph, laplacian, &opts, dir)?,
            None => graph_spectrum(&graph, laplacian, &opts)?,
        }))
    } else {
        None
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut curves = Vec::new();
    for kind in kinds {
        let config = ExperimentConfig {
            acquisition: kind,
            steps: a.steps,
            trials: a.trials,
            seed: a.seed,
            gamma: a.gamma,
            m,
            k: a.k,
            metric: a.metric.into(),
            laplacian,
            initial_per_class: a.initial_per_class,
            split: split.clone(),
            ..ExperimentConfig::default()
        };
        let start = Instant::now();
        let result = run_on_graph(graph.clone(), spectral.clone(), &truth, labels.classes, &config)?;
        let curve_path = a.out.join(format!("curve-{kind}.csv"));
        fs::write(&curve_path, result.curve.to_csv()).with_context(|| format!("writing {}", curve_path.display()))?;
        let journal_path = a.out.join(format!("journal-{kind}.csv"));
        fs::write(&journal_path, result.journal_csv()).with_context(|| format!("writing {}", journal_path.display()))?;
        let last = result.curve.mean.len() - 1;
        println!(
            "{kind}: accuracy {:.4} -> {:.4} over {} steps, {} trials ({:.1}s)",
            result.curve.mean[0],
            result.curve.mean[last],
            a.steps,
            a.trials,
            start.elapsed().as_secs_f64()
        );
        curves.push(result.curve);
    }
    let plot = serde_json::to_string_pretty(&plot_json(&curves))?;
    fs::write(a.out.join("plot.json"), plot).context("writing plot.json")?;
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let store = Arc::new(SessionStore::open(&a.session_root).context("opening session root")?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("cannot listen on {}", a.addr))?;
        let local = listener.local_addr()?;
        eprintln!(
            "serving {} sessions from {} on http://{local}",
            store.ids().len(),
            store.root().display()
        );
        graphal_service::serve(listener, store, shutdown_signal()).await?;
        eprintln!("shut down");
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("installing SIGTERM handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

fn transform_sar_cmd(a: TransformSarArgs) -> Result<()> {
    let mag = read_features(&a.magnitude, None)?;
    let phase = read_features(&a.phase, None)?;
    let img = SarImagePair::from_features(&mag, &phase)?;
    let out = sar_to_3channel(&img).to_features()?;
    save_features(&out, &a.out, FeatureFormat::from_path(&a.out))?;
    println!("{}x{} pixels -> {}x{} features", img.height, img.width, out.n(), out.d());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let session = ActiveSession::open(&a.session)?;
    let text = match a.what {
        ExportKind::Predictions => session.predictions().to_csv(),
        ExportKind::History => graphal_core::session::journal_to_csv(session.journal()),
        ExportKind::Accuracy => {
            if session.truth().is_none() {
                bail!(Error::InvalidParameter("session has no ground-truth labels".into()));
            }
            let mut out = String::from("labeled_count,accuracy\n");
            for (count, acc) in session.accuracy_trace() {
                out.push_str(&format!("{count},{acc}\n"));
            }
            out
        }
        ExportKind::NodeFunction => {
            let Some(out) = &a.out else {
                bail!(Error::InvalidParameter("--out is required for node-function".into()));
            };
            let Some(u) = session.solution() else {
                bail!(Error::InvalidParameter("session has no labels yet".into()));
            };
            u.save(out)?;
            return Ok(());
        }
    };
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        kind: match a.kind {
            SynthKindArg::Blobs => SynthKind::Blobs,
            SynthKindArg::Moons => SynthKind::Moons,
        },
        n: a.n,
        classes: a.classes,
        noise: a.noise,
        seed: a.seed,
        dim: a.dim,
    };
    let (x, y) = spec.generate()?;
    save_features(&x, &a.features, FeatureFormat::from_path(&a.features))?;
    fs::write(&a.labels, y.to_csv()).with_context(|| format!("writing {}", a.labels.display()))?;
    println!("n={} d={} classes={}", x.n(), x.d(), y.classes);
    Ok(())
}
