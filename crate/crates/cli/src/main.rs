//! `zpt`: generate a corpus, pre-train, train the generator, evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zpt_core::checkpoint::Checkpoint;
use zpt_core::config::RunConfig;
use zpt_core::evalharness::{export_projection, GraphEmbeddings};
use zpt_core::pipeline::{self, EvalInputs, Mode};
use zpt_core::tagcore::{load_tag, save_tag};
use zpt_core::ZptError;

#[derive(Parser)]
#[command(name = "zpt", version, about = "Zero-shot prompt tuning on text-attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Graph directory.
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained model checkpoint.
    #[arg(long)]
    pretrained: PathBuf,
    /// Generator checkpoint (required by zpt, zpt-context, node-only, simple).
    #[arg(long)]
    ubcg: Option<PathBuf>,
    /// One of zpt, zpt-context, discrete, node-only, simple, pseudo.
    #[arg(long, default_value = "zpt")]
    mode: String,
    /// Discrete template, or context words for zpt-context.
    #[arg(long)]
    template: Option<String>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the 2-D projection CSV here.
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted synthetic corpus.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Output graph directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training of the graph and text encoders.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the per-step log goes next to it as `.log.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bimodal conditional generator on frozen embeddings.
    TrainUbcg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one method over the sampled zero-shot tasks.
    Eval(EvalArgs),
    /// `eval` plus the projection export (default `<out>.projection.csv`).
    Visualize(EvalArgs),
}

/// Usage and configuration problems exit 2; failures while running exit 3.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ZptError> for Failure {
    fn from(e: ZptError) -> Self {
        match e {
            ZptError::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Errors while reading inputs are the caller's to fix.
fn input<T>(r: zpt_core::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let config = match &common.config {
        Some(p) => input(RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => config.with_seed(s),
        None => config.resolved(),
    })
}

fn write(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(ZptError::io(dir, e)))?;
    }
    std::fs::write(path, text).map_err(|e| ZptError::io(path, e).into())
}

fn synth_data(common: &Common, out: &Path) -> CmdResult {
    let config = load_config(common)?;
    let graph = pipeline::build_corpus(&config)?;
    save_tag(&graph, out)?;
    println!("wrote {} nodes, {} edges to {}", graph.num_nodes(), graph.num_edges(), out.display());
    Ok(())
}

fn pretrain(common: &Common, data: &Path, out: &Path) -> CmdResult {
    let config = load_config(common)?;
    let graph = input(load_tag(data))?;
    let outcome = pipeline::run_pretrain(&graph, &config)?;
    let echo = serde_json::to_value(&config.pretrain).expect("config serializes");
    Checkpoint::from_pretrained(&outcome.model, echo).save(out)?;
    let log: String = outcome
        .log
        .iter()
        .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
        .collect();
    let log_path = out.with_extension("log.jsonl");
    write(&log_path, &log)?;
    let means = outcome.epoch_means();
    println!(
        "pretrained {} epochs at lr {}: loss {:.4} -> {:.4}",
        config.pretrain.epochs,
        config.pretrain.learning_rate,
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint {} log {}", out.display(), log_path.display());
    Ok(())
}

fn train_ubcg(common: &Common, data: &Path, pretrained: &Path, out: &Path) -> CmdResult {
    let config = load_config(common)?;
    let graph = input(load_tag(data))?;
    let model = input(Checkpoint::load(pretrained).and_then(|c| c.to_pretrained()))?;
    let emb = GraphEmbeddings::compute(&model, &graph)?;
    let outcome = pipeline::run_train_ubcg(&emb, &config)?;
    Checkpoint::from_ubcg(&outcome.model).save(out)?;
    println!("parameters: {}", outcome.model.parameter_count());
    println!(
        "trained {} epochs at lr {}: final loss {:.4}",
        config.ubcg.epochs,
        config.ubcg.learning_rate,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint {}", out.display());
    Ok(())
}

fn eval(args: &EvalArgs, projection: Option<PathBuf>) -> CmdResult {
    let mode: Mode = args.mode.parse().map_err(|e: ZptError| Failure::Usage(e.to_string()))?;
    let config = load_config(&args.common)?;
    let graph = input(load_tag(&args.data))?;
    let model = input(Checkpoint::load(&args.pretrained).and_then(|c| c.to_pretrained()))?;
    let ubcg = match &args.ubcg {
        Some(p) => Some(input(Checkpoint::load(p).and_then(|c| c.to_ubcg()))?),
        None => None,
    };
    if (mode.needs_generator() || projection.is_some()) && ubcg.is_none() {
        return Err(Failure::Usage(format!("mode {mode} needs --ubcg")));
    }
    if let Some(u) = &ubcg {
        if mode == Mode::NodeOnly && u.config.bimodal {
            return Err(Failure::Usage(
                "node-only needs a generator trained with ubcg.bimodal = false".into(),
            ));
        }
    }
    let emb = GraphEmbeddings::compute(&model, &graph)?;
    let tasks = pipeline::tasks_for(&graph, &config)?;
    let inputs = EvalInputs {
        graph: &graph,
        emb: &emb,
        model: &model,
        ubcg: ubcg.as_ref(),
        tasks: &tasks,
    };
    let report = pipeline::evaluate_mode(&inputs, &config, mode, args.template.as_deref())?;
    write(&args.out, &report.to_json())?;
    println!(
        "{mode}: accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4} over {} tasks (run {})",
        report.accuracy.mean,
        report.accuracy.std,
        report.macro_f1.mean,
        report.macro_f1.std,
        report.tasks.len(),
        report.run_id
    );
    if let (Some(csv), Some(u)) = (projection, &ubcg) {
        let (real, synth) = pipeline::projection_pairs(&graph, &emb, &model, u, &config)?;
        if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::from(ZptError::io(dir, e)))?;
        }
        let centroids = export_projection(&real, &synth, &csv, config.seed)?;
        println!(
            "projection {}: synthetic centroids nearest their class, node {}/{} text {}/{}",
            csv.display(),
            centroids.node_matches,
            centroids.node.len(),
            centroids.text_matches,
            centroids.text.len()
        );
    }
    println!("report {}", args.out.display());
    Ok(())
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("ZPT_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("ZPT_NUM_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::SynthData { common, out } => synth_data(common, out),
        Command::Pretrain { common, data, out } => pretrain(common, data, out),
        Command::TrainUbcg {
            common,
            data,
            pretrained,
            out,
        } => train_ubcg(common, data, pretrained, out),
        Command::Eval(args) => eval(args, args.projection.clone()),
        Command::Visualize(args) => {
            let csv = args.projection.clone().unwrap_or_else(|| args.out.with_extension("projection.csv"));
            eval(args, Some(csv))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
