//! Experiment front door: `run` drives full federated searches, `sample`
//! streams mask logs without training, `analyze` recomputes exploration
//! diagnostics from a saved log.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsupernet::analysis::{diagnostics_to_csv, overlap_to_csv};
use fedsupernet::dataio::{gen_blobs, gen_spirals, load_csv, load_idx, Dataset};
use fedsupernet::federation::{run_experiment, ExperimentConfig};
use fedsupernet::micromodel::SearchSpaceConfig;
use fedsupernet::sampling::{init_sampler, next_round_masks, sampler_replay, Strategy};
use fedsupernet::searchspace::{mask_log_to_jsonl, MaskRecord, SparsityBudget};
use fedsupernet::seeds::{derive_seed, Consumer};

mod config;
use config::{DatasetSpec, Effective, Resolved};

#[derive(Parser)]
#[command(name = "fedsupernet", version, about = "Federated supernet search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics, mask log, checkpoint, and
    /// config echo into the output directory
    Run(Box<RunArgs>),
    /// Stream sampled architecture masks as JSON lines, no training
    Sample(SampleArgs),
    /// Recompute Hamming diagnostics and per-bit overlap from a mask log
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
#[command(after_help = "Precedence: command-line flags override config-file \
values, which override built-in defaults. The config file holds one \
`key = value` per line; `#` starts a comment line.")]
struct RunArgs {
    /// Config file with the keys: strategy, clients, rounds, seed,
    /// s_target, alpha_iid, dataset, edges, ops, channels, lr_w, lr_alpha,
    /// lambda, clip, epochs, batch, out_dir
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mask sampling strategy (diversified, diversified_reset,
    /// diversified_reset10, random, antithetic, common, complement,
    /// hadamard, nosampling)
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Target sparsity: one fraction, or "mu,sigma" for per-client draws
    #[arg(long)]
    s_target: Option<String>,
    /// "iid" or a Dirichlet concentration for label-skewed partitioning
    #[arg(long)]
    alpha_iid: Option<String>,
    /// blobs | spirals | idx:<images>,<labels> | csv:<path>
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    edges: Option<String>,
    #[arg(long)]
    ops: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    lr_w: Option<String>,
    #[arg(long)]
    lr_alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Cap concurrent client simulations (default: all cores). Does not
    /// change results, only scheduling.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Sampling strategy name
    strategy: String,
    /// Mask length (operation slots)
    #[arg(long)]
    n: usize,
    #[arg(long)]
    clients: usize,
    #[arg(long)]
    rounds: u32,
    #[arg(long)]
    seed: u64,
    /// Target sparsity recorded with each mask
    #[arg(long, default_value_t = 0.5)]
    s_target: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Mask log (JSON lines) to analyze
    log: PathBuf,
    /// Where to write diagnostics.csv and overlap.csv
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Failures split by exit code: 2 for configuration problems, 1 for
/// runtime errors.
enum Failure {
    Config(String),
    Runtime(String),
}

use Failure::{Config, Runtime};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Sample(args) => cmd_sample(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn merge_layers(args: &RunArgs) -> Result<Effective, Failure> {
    let mut eff = Effective::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Config(format!("{}: {e}", path.display())))?;
        eff.apply_file(&text).map_err(Config)?;
    }
    let overrides: [(&str, &Option<String>); 16] = [
        ("strategy", &args.strategy),
        ("clients", &args.clients),
        ("rounds", &args.rounds),
        ("seed", &args.seed),
        ("s_target", &args.s_target),
        ("alpha_iid", &args.alpha_iid),
        ("dataset", &args.dataset),
        ("edges", &args.edges),
        ("ops", &args.ops),
        ("channels", &args.channels),
        ("lr_w", &args.lr_w),
        ("lr_alpha", &args.lr_alpha),
        ("lambda", &args.lambda),
        ("clip", &args.clip),
        ("epochs", &args.epochs),
        ("batch", &args.batch),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            eff.set(key, v).map_err(Config)?;
        }
    }
    if let Some(dir) = &args.out_dir {
        eff.set("out_dir", dir).map_err(Config)?;
    }
    Ok(eff)
}

fn build_dataset(resolved: &Resolved) -> Result<Dataset, Failure> {
    let seed = derive_seed(resolved.seed, Consumer::DataGen);
    let ds = match &resolved.dataset {
        DatasetSpec::Blobs => gen_blobs(3, 200, 8, 0.5, seed),
        DatasetSpec::Spirals => gen_spirals(3, 256, 0.05, seed),
        DatasetSpec::Idx { images, labels } => {
            load_idx(images, labels).map_err(|e| Runtime(e.to_string()))?
        }
        DatasetSpec::Csv(path) => {
            load_csv(path, "label").map_err(|e| Runtime(e.to_string()))?
        }
    };
    Ok(ds)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let eff = merge_layers(&args)?;
    let echo = eff.echo();
    let resolved = eff.resolve().map_err(Config)?;

    if let Some(workers) = args.workers {
        if workers == 0 {
            return Err(Config("workers: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Runtime(format!("thread pool: {e}")))?;
    }

    let ds = build_dataset(&resolved)?;
    let cfg = ExperimentConfig {
        clients: resolved.clients,
        rounds: resolved.rounds,
        strategy: resolved.strategy,
        s_target: resolved.s_target.clone(),
        partitioning: resolved.partitioning,
        seed: resolved.seed,
        space: SearchSpaceConfig {
            edges: resolved.edges,
            ops_per_edge: resolved.ops,
            channels: resolved.channels,
            d_in: ds.d_in(),
            classes: ds.class_count,
        },
        training: resolved.training,
        server_coeff: 1.0,
    };
    // surface bad values as exit 2, before any work happens
    cfg.validate().map_err(|e| Config(e.to_string()))?;

    let out = run_experiment(&cfg, &ds).map_err(|e| Runtime(e.to_string()))?;

    let dir = &resolved.out_dir;
    fs::create_dir_all(dir).map_err(|e| Runtime(format!("{}: {e}", dir.display())))?;
    let write = |name: &str, contents: &str| {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Runtime(format!("{}: {e}", path.display())))
    };
    write("metrics.csv", &out.metrics_csv)?;
    write("masks.jsonl", &out.mask_log)?;
    let checkpoint = serde_json::to_string_pretty(&out.checkpoint)
        .map_err(|e| Runtime(format!("checkpoint: {e}")))?;
    write("checkpoint.json", &checkpoint)?;
    write("config-echo.txt", &echo)?;

    if let Some(last) = out.state.metrics.last() {
        println!(
            "{} rounds done: supernet_test_acc={:.4} argmax_test_acc={:.4}",
            last.round, last.supernet_test_acc, last.argmax_test_acc
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), Failure> {
    let strategy: Strategy =
        args.strategy.parse().map_err(|e| Config(format!("strategy: {e}")))?;
    if args.n == 0 || args.clients == 0 {
        return Err(Config("n and clients must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&args.s_target) {
        return Err(Config(format!("s_target: must be in [0,1), got {}", args.s_target)));
    }
    // same seed derivation as `run`, so the logs line up for equal seeds
    let mut state = init_sampler(
        strategy,
        args.n,
        args.clients,
        derive_seed(args.seed, Consumer::Sampler),
    );
    let mut records: Vec<MaskRecord> = Vec::new();
    for _ in 0..args.rounds {
        for mask in next_round_masks(&mut state) {
            let budget = SparsityBudget::for_mask(args.s_target, &mask)
                .map_err(|e| Runtime(e.to_string()))?;
            records.push(MaskRecord::new(&mask, budget));
        }
    }
    print!("{}", mask_log_to_jsonl(&records));
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.log)
        .map_err(|e| Runtime(format!("{}: {e}", args.log.display())))?;
    let entries = sampler_replay(&text).map_err(|e| Runtime(e.to_string()))?;
    let diag = fedsupernet::analysis::diagnose_log(&entries)
        .map_err(|e| Runtime(e.to_string()))?;

    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Runtime(format!("{}: {e}", args.out_dir.display())))?;
    let diagnostics_path = args.out_dir.join("diagnostics.csv");
    let overlap_path = args.out_dir.join("overlap.csv");
    fs::write(&diagnostics_path, diagnostics_to_csv(&diag))
        .map_err(|e| Runtime(format!("{}: {e}", diagnostics_path.display())))?;
    fs::write(&overlap_path, overlap_to_csv(&diag))
        .map_err(|e| Runtime(format!("{}: {e}", overlap_path.display())))?;
    println!("{} rounds -> {} and {}", diag.rounds.len(), diagnostics_path.display(), overlap_path.display());
    Ok(())
}
