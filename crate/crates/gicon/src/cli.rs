//! Command-line driver: dataset generation, index building, training, the
//! evaluation protocols, and report rendering. Every run lands its artifacts
//! in an output directory together with a manifest (config echo, seed, input
//! hashes) sufficient to reproduce it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    emit_report, file_hash, read_report_rows, write_svg, EvalError, Evaluator, NoiseMode, Report,
};
use crate::graph::{generate, read_dataset, write_dataset, Dataset, FormatError};
use crate::model::ModelError;
use crate::retrieval::{read_index, write_index, PoolIndex, RetrievalError};
use crate::train::{
    load_checkpoint, save_checkpoint, train_loop, TrainContext, TrainError, TrainState,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] crate::graph::DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "gicon",
    version,
    about = "In-context operator learning on station graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and write it in the canonical format.
    GenData(GenDataArgs),
    /// Build the retrieval feature index for a dataset.
    BuildIndex(BuildIndexArgs),
    /// Train a model; writes checkpoints and a training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint at the configured gaps and counts.
    Eval(EvalArgs),
    /// Cardinality sweep: RMSE versus example count.
    Sweep(EvalArgs),
    /// Evaluate at time gaps outside the training range (rows are flagged).
    Extrapolate(EvalArgs),
    /// Evaluate a checkpoint on a dataset with a different graph.
    Transfer(EvalArgs),
    /// Compare retrieved contexts against Gaussian-noise contexts.
    AblateNoise(AblateArgs),
    /// Render an existing report CSV as an SVG chart.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Config file ([data] section applies).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $GICON_OUT_ROOT/gen-data or ./runs/gen-data].
    #[arg(long, alias = "out")]
    pub out_dir: Option<PathBuf>,
    /// Generator seed (required; no wall-clock default).
    #[arg(long)]
    pub seed: u64,
    /// Station count [default: 32].
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Frames to generate [default: 2000].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Channels including the wind driver [default: 4].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Edge connection radius in km [default: 30].
    #[arg(long)]
    pub radius_km: Option<f64>,
    /// Diffusion coefficient [default: 0.04].
    #[arg(long)]
    pub diffusion: Option<f64>,
    /// Advection strength [default: 0.35].
    #[arg(long)]
    pub advection: Option<f64>,
    /// Forcing amplitude [default: 1.0].
    #[arg(long)]
    pub forcing: Option<f64>,
    /// Leading fraction of frames used as the training region [default: 0.8].
    #[arg(long)]
    pub train_frac: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    /// Config file ([model]/[train] sections provide tau defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset to index.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory [default: $GICON_OUT_ROOT/build-index or ./runs/build-index].
    #[arg(long, alias = "out")]
    pub out_dir: Option<PathBuf>,
    /// Key window length [default: 24].
    #[arg(long)]
    pub tau: Option<usize>,
    /// Pooled frames per feature [default: 24].
    #[arg(long)]
    pub tau_r: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Retrieval index; built on the fly when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Training seed (required; no wall-clock default).
    #[arg(long)]
    pub seed: u64,
    /// Output directory [default: $GICON_OUT_ROOT/train or ./runs/train].
    #[arg(long, alias = "out")]
    pub out_dir: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps [default: 90000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sequences per step [default: 8].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Operator regime: uniform | single [default: uniform].
    #[arg(long)]
    pub regime: Option<String>,
    /// Fixed gap for the single regime [default: 24].
    #[arg(long)]
    pub dt: Option<usize>,
    /// Uniform regime lower gap [default: 1].
    #[arg(long)]
    pub dt_lo: Option<usize>,
    /// Uniform regime upper gap [default: 24].
    #[arg(long)]
    pub dt_hi: Option<usize>,
    /// Maximum context size; k is drawn from {0..k_max} [default: 5].
    #[arg(long)]
    pub k_max: Option<usize>,
    /// First-stage retrieval size K [default: 32].
    #[arg(long)]
    pub retrieval_k: Option<usize>,
    /// Key window length [default: 24].
    #[arg(long)]
    pub tau: Option<usize>,
    /// Pooled frames per retrieval feature [default: 24].
    #[arg(long)]
    pub tau_r: Option<usize>,
    /// Node embedding width [default: 128].
    #[arg(long)]
    pub d_node: Option<usize>,
    /// Stacked layers [default: 3].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 512].
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Message width [default: 256].
    #[arg(long)]
    pub d_msg: Option<usize>,
    /// Edge embedding width [default: 128].
    #[arg(long)]
    pub d_edge: Option<usize>,
    /// Dropout rate [default: 0.1].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Steps between log rows [default: 100].
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Steps between intermediate checkpoints; 0 = final only [default: 0].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Config file ([eval] section applies).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to evaluate on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Retrieval index for the dataset; built on the fly when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Evaluation seed (required; no wall-clock default).
    #[arg(long)]
    pub seed: u64,
    /// Output directory [default: $GICON_OUT_ROOT/<command> or ./runs/<command>].
    #[arg(long, alias = "out")]
    pub out_dir: Option<PathBuf>,
    /// Time gaps, comma separated [default: 1,4,12,24].
    #[arg(long)]
    pub dts: Option<String>,
    /// Example counts, comma separated ascending [default: 0,1,2,5,10,20,50,100].
    #[arg(long)]
    pub counts: Option<String>,
    /// Example selection: topk | random [default: topk].
    #[arg(long)]
    pub selection: Option<String>,
    /// Query stride through the test region [default: 1].
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Noise standard deviation in normalized units [default: 1.0].
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report CSV produced by an evaluation subcommand.
    #[arg(long)]
    pub input: PathBuf,
    /// SVG output path [default: <input>.svg].
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Library entry for tests: run with explicit arguments.
pub fn run_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(cli) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            code
        }
    }
}

fn out_dir_for(cmd: &str, explicit: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    let root = std::env::var_os("GICON_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cmd)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    inputs: &[(&str, &Path)],
    artifacts: &[&str],
) -> Result<(), CliError> {
    let mut input_hashes = serde_json::Map::new();
    for (name, path) in inputs {
        input_hashes.insert(
            name.to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "fnv1a64": format!("{:016x}", file_hash(path)?),
            }),
        );
    }
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": serde_json::to_value(cfg).map_err(FormatError::Header)?,
        "inputs": input_hashes,
        "artifacts": artifacts,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(FormatError::Header)?,
    )?;
    Ok(())
}

fn parse_usize_list(name: &str, text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Other(format!("--{name}: `{p}`: {e}")))
        })
        .collect()
}

pub fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::BuildIndex(args) => build_index(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => evaluate(args, "eval", NoiseMode::Off),
        Command::Sweep(args) => evaluate(args, "sweep", NoiseMode::Off),
        Command::Extrapolate(args) => evaluate(args, "extrapolate", NoiseMode::Off),
        Command::Transfer(args) => evaluate(args, "transfer", NoiseMode::Off),
        Command::AblateNoise(args) => {
            let sigma = args.sigma.unwrap_or(1.0);
            if sigma <= 0.0 {
                return Err(CliError::Other(format!("--sigma must be > 0, got {sigma}")));
            }
            evaluate(args.eval, "ablate-noise", NoiseMode::Gaussian { sigma })
        }
        Command::Report(args) => report(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.nodes {
        cfg.data.nodes = v;
    }
    if let Some(v) = args.horizon {
        cfg.data.horizon = v;
    }
    if let Some(v) = args.channels {
        cfg.data.channels = v;
    }
    if let Some(v) = args.radius_km {
        cfg.data.radius_km = v;
    }
    if let Some(v) = args.diffusion {
        cfg.data.diffusion = v;
    }
    if let Some(v) = args.advection {
        cfg.data.advection = v;
    }
    if let Some(v) = args.forcing {
        cfg.data.forcing = v;
    }
    if let Some(v) = args.train_frac {
        cfg.data.train_frac = v;
    }
    let out = out_dir_for("gen-data", args.out_dir.as_deref(), &cfg);
    std::fs::create_dir_all(&out)?;
    let spec = cfg.data.synth_spec(args.seed);
    let (graph, series) = generate(&spec)?;
    let ds = Dataset::assemble(graph, series, cfg.data.train_frac)?;
    let path = out.join("dataset.gds");
    write_dataset(&ds, &path)?;
    write_manifest(&out, "gen-data", &cfg, args.seed, &[], &["dataset.gds"])?;
    println!(
        "wrote {} ({} nodes, {} frames, {} channels)",
        path.display(),
        ds.graph.n_nodes(),
        ds.series.horizon(),
        ds.series.n_channels()
    );
    Ok(0)
}

fn build_index(args: BuildIndexArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.tau {
        cfg.model.tau = v;
    }
    if let Some(v) = args.tau_r {
        cfg.train.tau_r = v;
    }
    let out = out_dir_for("build-index", args.out_dir.as_deref(), &cfg);
    std::fs::create_dir_all(&out)?;
    let ds = read_dataset(&args.dataset)?;
    let index = PoolIndex::build(&ds, cfg.model.tau, cfg.train.tau_r, 0)?;
    let path = out.join("index.gix");
    write_index(&index, file_hash(&args.dataset)?, &path)?;
    write_manifest(
        &out,
        "build-index",
        &cfg,
        0,
        &[("dataset", args.dataset.as_path())],
        &["index.gix"],
    )?;
    println!(
        "wrote {} ({} key origins, dim {})",
        path.display(),
        index.origins.len(),
        index.dim
    );
    Ok(0)
}

fn load_or_build_index(
    index_path: Option<&Path>,
    ds: &Dataset,
    tau: usize,
    tau_r: usize,
) -> Result<PoolIndex, CliError> {
    match index_path {
        Some(p) => {
            let (index, _) = read_index(p)?;
            if index.tau != tau || index.tau_r != tau_r {
                return Err(CliError::Other(format!(
                    "index built with tau={}, tau_r={}, run needs tau={tau}, tau_r={tau_r}",
                    index.tau, index.tau_r
                )));
            }
            Ok(index)
        }
        None => Ok(PoolIndex::build(ds, tau, tau_r, 0)?),
    }
}

fn train(args: TrainArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = &args.regime {
        cfg.train.regime = v.clone();
    }
    if let Some(v) = args.dt {
        cfg.train.dt = v;
    }
    if let Some(v) = args.dt_lo {
        cfg.train.dt_lo = v;
    }
    if let Some(v) = args.dt_hi {
        cfg.train.dt_hi = v;
    }
    if let Some(v) = args.k_max {
        cfg.train.k_max = v;
    }
    if let Some(v) = args.retrieval_k {
        cfg.train.retrieval_k = v;
    }
    if let Some(v) = args.tau {
        cfg.model.tau = v;
    }
    if let Some(v) = args.tau_r {
        cfg.train.tau_r = v;
    }
    if let Some(v) = args.d_node {
        cfg.model.d_node = v;
    }
    if let Some(v) = args.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = args.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = args.d_ff {
        cfg.model.d_ff = v;
    }
    if let Some(v) = args.d_msg {
        cfg.model.d_msg = v;
    }
    if let Some(v) = args.d_edge {
        cfg.model.d_edge = v;
    }
    if let Some(v) = args.dropout {
        cfg.model.dropout = v;
    }
    if let Some(v) = args.log_every {
        cfg.train.log_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }

    let out = out_dir_for("train", args.out_dir.as_deref(), &cfg);
    std::fs::create_dir_all(&out)?;
    let ds = read_dataset(&args.dataset)?;
    let train_cfg = cfg.train.train_config(args.seed)?;
    let model_cfg = cfg
        .model
        .model_config(ds.series.n_channels(), ds.series.target_channels().to_vec());
    let index = load_or_build_index(
        args.index.as_deref(),
        &ds,
        model_cfg.tau,
        train_cfg.tau_r,
    )?;
    let ctx = TrainContext::new(&ds, &index);

    let mut state = match &args.resume {
        Some(p) => {
            let loaded = load_checkpoint(p)?;
            if loaded.channel_names != ds.series.channel_names() {
                return Err(CliError::Other(format!(
                    "resume checkpoint channel schema {:?} does not match dataset {:?}",
                    loaded.channel_names,
                    ds.series.channel_names()
                )));
            }
            loaded.state
        }
        None => TrainState::<f32>::new(model_cfg, train_cfg.clone())?,
    };

    let log_path = out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    use std::io::Write;
    writeln!(log, "step,lr,loss,wall_s")?;
    let names = ds.series.channel_names().to_vec();
    let total = state.train_cfg.total_steps;
    let ckpt_every = state.train_cfg.checkpoint_every;
    let mut next_ckpt = if ckpt_every > 0 {
        state.step + ckpt_every
    } else {
        usize::MAX
    };
    while state.step < total {
        let until = total.min(next_ckpt);
        train_loop(&mut state, &ctx, until, |row| {
            let _ = writeln!(
                log,
                "{},{:.6e},{:.6e},{:.3}",
                row.step, row.lr, row.loss, row.wall_s
            );
        })?;
        if state.step == next_ckpt && state.step < total {
            save_checkpoint(&state, &names, &out.join(format!("checkpoint_{}.gcp", state.step)))?;
            next_ckpt += ckpt_every;
        }
    }
    log.flush()?;
    let final_path = out.join("checkpoint.gcp");
    save_checkpoint(&state, &names, &final_path)?;
    write_manifest(
        &out,
        "train",
        &cfg,
        args.seed,
        &[("dataset", args.dataset.as_path())],
        &["checkpoint.gcp", "train_log.csv"],
    )?;
    println!("wrote {} at step {}", final_path.display(), state.step);
    Ok(0)
}

fn evaluate(args: EvalArgs, command: &str, noise: NoiseMode) -> Result<i32, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = &args.dts {
        cfg.eval.dts = parse_usize_list("dts", v)?;
    }
    if let Some(v) = &args.counts {
        cfg.eval.counts = parse_usize_list("counts", v)?;
    }
    if let Some(v) = &args.selection {
        cfg.eval.selection = v.clone();
    }
    if let Some(v) = args.stride {
        cfg.eval.stride = v;
    }
    let out = out_dir_for(command, args.out_dir.as_deref(), &cfg);
    std::fs::create_dir_all(&out)?;

    let loaded = load_checkpoint(&args.checkpoint)?;
    let ds = read_dataset(&args.dataset)?;
    let index = load_or_build_index(
        args.index.as_deref(),
        &ds,
        loaded.state.model_cfg.tau,
        loaded.state.train_cfg.tau_r,
    )?;
    let mut spec = cfg.eval.eval_spec(args.seed)?;
    spec.noise = noise;

    let mut ev = Evaluator::new(
        &loaded.state.params,
        &loaded.state.model_cfg,
        Some(loaded.state.train_cfg.regime),
        &ds,
        &index,
    );
    ev.checkpoint_hash = file_hash(&args.checkpoint)?;
    ev.dataset_hash = file_hash(&args.dataset)?;
    ev.check_schema(&loaded.channel_names)?;
    let report = ev.run(&spec)?;

    let csv = out.join("report.csv");
    let svg = out.join("report.svg");
    emit_report(&report, &csv, Some(&svg))?;
    write_manifest(
        &out,
        command,
        &cfg,
        args.seed,
        &[
            ("checkpoint", args.checkpoint.as_path()),
            ("dataset", args.dataset.as_path()),
        ],
        &["report.csv", "report.svg"],
    )?;
    if matches!(noise, NoiseMode::Gaussian { .. }) {
        // quality-vs-noise summary: mean |rmse - rmse_noise| per channel
        let mut by_channel: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
        for r in &report.rows {
            if let (Some(a), Some(b)) = (r.rmse, r.rmse_noise) {
                let e = by_channel.entry(r.channel.as_str()).or_insert((0.0, 0));
                e.0 += (a - b).abs();
                e.1 += 1;
            }
        }
        for (ch, (sum, n)) in by_channel {
            println!(
                "channel {ch}: mean |rmse_quality - rmse_noise| = {:.6e} over {n} cells",
                sum / n as f64
            );
        }
    }
    let errors = report.has_errors();
    println!(
        "wrote {} ({} rows{})",
        csv.display(),
        report.rows.len(),
        if errors { ", with cell errors" } else { "" }
    );
    Ok(if errors { 1 } else { 0 })
}

fn report(args: ReportArgs) -> Result<i32, CliError> {
    let rows = read_report_rows(&args.input)?;
    if rows.is_empty() {
        return Err(CliError::Other("report has no rows".into()));
    }
    let svg_path = args
        .svg
        .unwrap_or_else(|| args.input.with_extension("svg"));
    let report = Report {
        rows,
        checkpoint_hash: 0,
        dataset_hash: 0,
        seed: 0,
    };
    write_svg(&report, &svg_path)?;
    println!("wrote {}", svg_path.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("gicon-cli-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn run(args: &[&str]) -> i32 {
        run_with_args(std::iter::once("gicon").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(&["frobnicate"]), 2);
        assert_eq!(run(&[]), 2);
    }

    #[test]
    fn gen_data_writes_dataset_and_manifest() {
        let out = tmp_dir("gen");
        let code = run(&[
            "gen-data",
            "--nodes",
            "8",
            "--horizon",
            "60",
            "--seed",
            "7",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("dataset.gds").exists());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["command"], "gen-data");
        assert_eq!(manifest["seed"], 7);
        assert_eq!(manifest["config"]["data"]["nodes"], 8);
        let ds = read_dataset(&out.join("dataset.gds")).unwrap();
        assert_eq!(ds.graph.n_nodes(), 8);
        assert_eq!(ds.series.horizon(), 60);
    }

    #[test]
    fn full_pipeline_smoke() {
        let gen = tmp_dir("pipe-gen");
        assert_eq!(
            run(&[
                "gen-data", "--nodes", "8", "--horizon", "140", "--seed", "3",
                "--out-dir", gen.to_str().unwrap(),
            ]),
            0
        );
        let dataset = gen.join("dataset.gds");

        let idx = tmp_dir("pipe-idx");
        assert_eq!(
            run(&[
                "build-index",
                "--dataset", dataset.to_str().unwrap(),
                "--tau", "4", "--tau-r", "4",
                "--out-dir", idx.to_str().unwrap(),
            ]),
            0
        );
        assert!(idx.join("index.gix").exists());

        let tr = tmp_dir("pipe-train");
        assert_eq!(
            run(&[
                "train",
                "--dataset", dataset.to_str().unwrap(),
                "--index", idx.join("index.gix").to_str().unwrap(),
                "--seed", "5",
                "--steps", "4",
                "--batch", "2",
                "--tau", "4",
                "--tau-r", "4",
                "--d-node", "8",
                "--d-edge", "4",
                "--d-msg", "12",
                "--d-ff", "16",
                "--layers", "1",
                "--heads", "2",
                "--regime", "uniform",
                "--dt-lo", "1",
                "--dt-hi", "4",
                "--k-max", "2",
                "--retrieval-k", "8",
                "--checkpoint-every", "2",
                "--out-dir", tr.to_str().unwrap(),
            ]),
            0
        );
        let ckpt = tr.join("checkpoint.gcp");
        assert!(ckpt.exists());
        assert!(tr.join("checkpoint_2.gcp").exists(), "intermediate checkpoint series");
        let log = std::fs::read_to_string(tr.join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,lr,loss,wall_s"));
        assert!(log.lines().count() >= 2);

        let ev = tmp_dir("pipe-eval");
        let code = run(&[
            "sweep",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--dataset", dataset.to_str().unwrap(),
            "--index", idx.join("index.gix").to_str().unwrap(),
            "--seed", "9",
            "--dts", "1,2",
            "--counts", "0,1,2",
            "--stride", "6",
            "--out-dir", ev.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(ev.join("report.csv").exists());
        assert!(ev.join("report.svg").exists());
        let rows = read_report_rows(&ev.join("report.csv")).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 3); // dts x counts x target channels

        // re-render through the report subcommand
        let svg2 = ev.join("again.svg");
        assert_eq!(
            run(&[
                "report",
                "--input", ev.join("report.csv").to_str().unwrap(),
                "--svg", svg2.to_str().unwrap(),
            ]),
            0
        );
        assert!(svg2.exists());

        // extrapolation beyond the training gap range flags rows as ood
        let ex = tmp_dir("pipe-extrap");
        assert_eq!(
            run(&[
                "extrapolate",
                "--checkpoint", ckpt.to_str().unwrap(),
                "--dataset", dataset.to_str().unwrap(),
                "--index", idx.join("index.gix").to_str().unwrap(),
                "--seed", "9",
                "--dts", "8",
                "--counts", "0,1",
                "--stride", "8",
                "--out-dir", ex.to_str().unwrap(),
            ]),
            0
        );
        let rows = read_report_rows(&ex.join("report.csv")).unwrap();
        assert!(rows.iter().all(|r| r.flags.contains(&"ood".to_string())));

        // transfer onto a different graph with the same channel schema
        let gen_b = tmp_dir("pipe-gen-b");
        assert_eq!(
            run(&[
                "gen-data", "--nodes", "11", "--horizon", "140", "--seed", "17",
                "--out-dir", gen_b.to_str().unwrap(),
            ]),
            0
        );
        let tf = tmp_dir("pipe-transfer");
        assert_eq!(
            run(&[
                "transfer",
                "--checkpoint", ckpt.to_str().unwrap(),
                "--dataset", gen_b.join("dataset.gds").to_str().unwrap(),
                "--seed", "9",
                "--dts", "2",
                "--counts", "0,1",
                "--stride", "8",
                "--out-dir", tf.to_str().unwrap(),
            ]),
            0
        );
        assert!(tf.join("report.csv").exists());

        // noise ablation fills both rmse columns
        let ab = tmp_dir("pipe-ablate");
        assert_eq!(
            run(&[
                "ablate-noise",
                "--checkpoint", ckpt.to_str().unwrap(),
                "--dataset", dataset.to_str().unwrap(),
                "--index", idx.join("index.gix").to_str().unwrap(),
                "--seed", "9",
                "--sigma", "1.0",
                "--dts", "2",
                "--counts", "0,2",
                "--stride", "8",
                "--out-dir", ab.to_str().unwrap(),
            ]),
            0
        );
        let rows = read_report_rows(&ab.join("report.csv")).unwrap();
        assert!(rows.iter().all(|r| r.rmse_noise.is_some()));
        for r in rows.iter().filter(|r| r.example_count == 0) {
            assert_eq!(r.rmse, r.rmse_noise);
        }
    }

    #[test]
    fn help_exits_zero_on_every_subcommand() {
        for sub in [
            "gen-data", "build-index", "train", "eval", "sweep",
            "extrapolate", "transfer", "ablate-noise", "report",
        ] {
            assert_eq!(run(&[sub, "--help"]), 0, "help for {sub}");
        }
        assert_eq!(run(&["--help"]), 0);
    }

    #[test]
    fn flag_overrides_beat_config_file() {
        let dir = tmp_dir("precedence");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "[train]\nsteps = 90000\n[data]\nnodes = 5\nhorizon = 50\n")
            .unwrap();
        let out = tmp_dir("precedence-out");
        let code = run(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "1",
            "--nodes",
            "6",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let ds = read_dataset(&out.join("dataset.gds")).unwrap();
        // flag (6) beats file (5) beats default (32)
        assert_eq!(ds.graph.n_nodes(), 6);
        assert_eq!(ds.series.horizon(), 50);
    }

    #[test]
    fn bad_config_key_fails_with_diagnostic() {
        let dir = tmp_dir("badcfg");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "[model]\nlayers = three\n").unwrap();
        let code = run(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "1",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_seed_is_usage_error() {
        assert_eq!(run(&["gen-data", "--nodes", "4"]), 2);
    }
}
