//! `densecat` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use densecat::analysis::{capture_features, cka_csv, cka_grid, default_rank_tol, rank_csv};
use densecat::arch_json::{deserialize_architecture, serialize_architecture, ARCH_SCHEMA};
use densecat::cost::cost_report;
use densecat::gradcheck::check_all;
use densecat::graph::ModuleGraph;
use densecat::randnet::{run_paired_experiment, sample_pair, worker_count, Budget, RandSpec, Shortcut, SpaceId};
use densecat::train::checkpoint::{load_checkpoint, save_checkpoint};
use densecat::train::{load_dataset, train, DatasetHandle, DatasetSource, RunStatus, Split, TrainConfig};
use densecat::zoo::{build_model, config_by_name, model_by_name, ModelConfig};
use densecat::Error;
use serde_json::json;

const META_SCHEMA: &str = "densecat.meta/v1";

#[derive(Parser)]
#[command(name = "densecat", version, about = "Densely connected networks: build, cost, train, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage table of a model and optionally write its architecture JSON.
    Describe {
        /// Preset name, `ledger:<a-h>`, or a JSON file (architecture or model config).
        model: String,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Parameter, MAC and peak-activation counts.
    Count {
        model: String,
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// Directory for cost.csv and cost.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or a comma-separated list of op names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0.0, hide = true)]
        inject_fault: f64,
    },
    /// Train a model and write summary.json, curves.csv and meta.json.
    Train {
        model: String,
        #[command(flatten)]
        data: DataArgs,
        /// Training configuration JSON; fields left out keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also save the trained weights under <out>/checkpoint.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Random-network sampling and paired add/concat experiments.
    Randnet {
        #[command(subcommand)]
        action: RandnetAction,
    },
    /// Representation analysis of trained checkpoints.
    Analyze {
        #[command(subcommand)]
        action: AnalyzeAction,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// `blobs`, a CIFAR-10 binary file or directory, or a dataset JSON.
    #[arg(long, default_value = "blobs")]
    data: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Images per split for blobs; record limit for CIFAR-10.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Space id (A-E) or a spec JSON file.
    #[arg(long, default_value = "A")]
    spec: String,
    /// Budget JSON file; otherwise the cap flags apply.
    #[arg(long)]
    budget: Option<PathBuf>,
    #[arg(long, default_value_t = u64::MAX)]
    max_params: u64,
    #[arg(long, default_value_t = u64::MAX)]
    max_macs: u64,
    #[arg(long, default_value_t = u64::MAX)]
    max_activation_bytes: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShortcutArg {
    Add,
    Concat,
    Both,
}

#[derive(Subcommand)]
enum RandnetAction {
    /// Print one sampled pair (or member) with its costs.
    Sample {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ShortcutArg::Both)]
        shortcut: ShortcutArg,
    },
    /// Train paired networks; writes runs.csv, summary.json, cdf.csv.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "randnet")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FeatureArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated node names.
    #[arg(long)]
    layers: String,
    #[command(flatten)]
    data: DataArgs,
    /// Number of evaluation images fed through the model.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeAction {
    /// Linear CKA between layers of one checkpoint or of two.
    Cka {
        #[command(flatten)]
        features: FeatureArgs,
        /// Second checkpoint; compares the first against itself when absent.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Effective rank per layer at an absolute singular-value threshold.
    Rank {
        #[command(flatten)]
        features: FeatureArgs,
        /// Defaults to 1e-6·√rows.
        #[arg(long)]
        tol: Option<f64>,
    },
}

/// Failure classes, mapped to exit codes 1, 2 and 3.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
    Budget(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Budget { .. } => Failure::Budget(e.to_string()),
            Error::NonFinite(_) | Error::Numerical(_) | Error::BackwardTwice | Error::NotScalar(_) => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read_json(path: &Path) -> Result<serde_json::Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Timestamps live here so the primary outputs stay byte-reproducible.
fn write_meta(dir: &Path, command: &str, started: f64, clock: Instant) -> CmdResult {
    let meta = json!({
        "schema": META_SCHEMA,
        "command": command,
        "started_unix": started,
        "finished_unix": unix_now(),
        "elapsed_secs": clock.elapsed().as_secs_f64(),
        "threads": worker_count(),
    });
    write_file(&dir.join("meta.json"), &pretty(&meta)?)
}

/// Resolves a model argument. `classes` overrides the head width where the
/// model is given as a configuration.
fn load_model(arg: &str, classes: Option<usize>) -> Result<ModuleGraph, Failure> {
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        let value = read_json(path)?;
        if value.get("schema").and_then(|s| s.as_str()) == Some(ARCH_SCHEMA) {
            return Ok(deserialize_architecture(&serde_json::to_string(&value)?)?);
        }
        let mut cfg: ModelConfig = serde_json::from_value(value)?;
        if let Some(k) = classes {
            cfg.num_classes = k;
        }
        return Ok(build_model(&cfg)?);
    }
    match classes {
        None => Ok(model_by_name(arg)?),
        Some(k) => {
            let mut cfg = config_by_name(arg)?;
            cfg.num_classes = k;
            let mut g = build_model(&cfg)?;
            if let Some(step) = arg.strip_prefix("ledger:") {
                g.meta.kind = format!("ledger_{step}");
            }
            Ok(g)
        }
    }
}

fn dataset_handle(d: &DataArgs) -> Result<DatasetHandle, Failure> {
    if d.data == "blobs" {
        return Ok(DatasetHandle {
            source: DatasetSource::SyntheticBlobs {
                classes: d.classes,
                dim: d.image_size,
                n: d.n.unwrap_or(400),
                seed: d.data_seed,
                noise: d.noise,
            },
            split: Split::Train,
        });
    }
    if d.data.ends_with(".json") {
        return Ok(serde_json::from_value(read_json(Path::new(&d.data))?)?);
    }
    Ok(DatasetHandle {
        source: DatasetSource::Cifar10Binary {
            path: PathBuf::from(&d.data),
            limit: d.n,
        },
        split: Split::Train,
    })
}

fn cmd_describe(model: &str, input: usize, json_out: Option<&Path>) -> CmdResult {
    let g = load_model(model, None)?;
    let shapes = g.infer_shapes([1, g.input_channels(), input, input])?;
    println!("model: {model} ({})", g.meta.kind);
    if let Some(stem) = &g.meta.stem {
        println!(
            "stem: {} {}x{}/{} -> {} channels",
            stem.kind, stem.patch, stem.patch, stem.stride, stem.channels
        );
    }
    println!(
        "{:<6} {:>10} {:>6} {:>6} {:>4} {:>7} {:>6} {:>12}",
        "stage", "resolution", "c_in", "c_out", "gr", "blocks", "er", "transitions"
    );
    for s in &g.meta.stages {
        let shape = &shapes[s.output_node];
        let res = if shape.len() == 4 {
            format!("{}x{}", shape[2], shape[3])
        } else {
            "-".into()
        };
        println!(
            "{:<6} {:>10} {:>6} {:>6} {:>4} {:>7} {:>6} {:>12}",
            s.index, res, s.in_channels, s.out_channels, s.growth_rate, s.blocks, s.er, s.transitions
        );
    }
    if let Some(h) = &g.meta.head {
        println!("head: {} features -> {} classes", h.features, h.classes);
    }
    println!("params: {}", g.param_count());
    if let Some(path) = json_out {
        write_file(path, &serialize_architecture(&g)?)?;
    }
    Ok(())
}

fn cmd_count(model: &str, input: usize, out: Option<&Path>) -> CmdResult {
    let g = load_model(model, None)?;
    let report = cost_report(&g, model, [1, g.input_channels(), input, input])?;
    println!("model: {model}");
    println!("input: {input}x{input}");
    println!("params: {} ({:.3} M)", report.params, report.params as f64 / 1e6);
    println!("macs: {} ({:.3} G)", report.macs, report.macs as f64 / 1e9);
    println!(
        "peak_activation_bytes: {} ({:.1} MB)",
        report.peak_activation_bytes,
        report.peak_activation_bytes as f64 / 1e6
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("cost.csv"), &report.to_csv())?;
        write_file(&dir.join("cost.json"), &pretty(&report.summary_json())?)?;
    }
    Ok(())
}

fn cmd_gradcheck(ops: &str, seed: u64, step: f64, fault: f64) -> CmdResult {
    let rows = check_all(seed, step, 1.0 + fault);
    let wanted: Vec<&str> = if ops == "all" {
        rows.iter().map(|r| r.0.as_str()).collect()
    } else {
        ops.split(',').map(str::trim).collect()
    };
    for w in &wanted {
        if !rows.iter().any(|r| r.0 == *w) {
            let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
            return Err(Failure::Usage(format!("unknown op {w:?}; available: {}", names.join(", "))));
        }
    }
    let mut failed = Vec::new();
    for (name, outcome, tol) in rows.iter().filter(|r| wanted.contains(&r.0.as_str())) {
        match outcome {
            Ok(o) if o.max_rel_error < *tol => {
                println!("PASS {name} max_rel_error={:.3e} tol={tol:.0e}", o.max_rel_error)
            }
            Ok(o) => {
                println!("FAIL {name} max_rel_error={:.3e} tol={tol:.0e}", o.max_rel_error);
                failed.push(name.clone());
            }
            Err(e) => {
                println!("FAIL {name} error: {e}");
                failed.push(name.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => Ok(serde_json::from_value(read_json(p)?)?),
        None => Ok(TrainConfig::default()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    model: &str,
    data: &DataArgs,
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    checkpoint: bool,
) -> CmdResult {
    let started = unix_now();
    let clock = Instant::now();
    let mut cfg = train_config(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
        if e == 0 {
            cfg.warmup_epochs = 0;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let handle = dataset_handle(data)?;
    let train_set = load_dataset(&handle)?;
    let eval_set = load_dataset(&handle.with_split(Split::Test))?;
    let graph = load_model(model, Some(train_set.classes))?;
    let outcome = train(&graph, &train_set, &eval_set, &cfg)?;
    fs::create_dir_all(out)?;
    let s = &outcome.summary;
    write_file(&out.join("summary.json"), &pretty(s)?)?;
    if cfg.epochs > 0 {
        write_file(&out.join("curves.csv"), &s.curves_csv())?;
    }
    if checkpoint {
        save_checkpoint(&out.join("checkpoint"), &outcome.graph, &outcome.params)?;
    }
    write_meta(out, "train", started, clock)?;
    for r in &s.curve {
        println!("epoch {} train_loss {:.4} eval_acc {:.4}", r.epoch, r.train_loss, r.eval_acc);
    }
    if s.status == RunStatus::Failed {
        return Err(Failure::Numerical(format!(
            "training failed: {}",
            s.failure.as_deref().unwrap_or("unknown")
        )));
    }
    let acc = s.final_eval_acc.or(s.initial_eval_acc).unwrap_or(f64::NAN);
    println!("final eval accuracy {acc:.4}");
    Ok(())
}

fn load_spec(args: &SpecArgs) -> Result<(RandSpec, Budget), Failure> {
    let spec = match args.spec.as_str() {
        "A" | "a" => RandSpec::space(SpaceId::A),
        "B" | "b" => RandSpec::space(SpaceId::B),
        "C" | "c" => RandSpec::space(SpaceId::C),
        "D" | "d" => RandSpec::space(SpaceId::D),
        "E" | "e" => RandSpec::space(SpaceId::E),
        path => serde_json::from_value(read_json(Path::new(path))?)?,
    };
    spec.validate()?;
    let budget = match &args.budget {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => Budget {
            max_params: args.max_params,
            max_macs: args.max_macs,
            max_activation_bytes: args.max_activation_bytes,
        },
    };
    budget.validate()?;
    Ok((spec, budget))
}

fn cmd_randnet_sample(args: &SpecArgs, seed: u64, which: ShortcutArg) -> CmdResult {
    let (spec, budget) = load_spec(args)?;
    let pair = sample_pair(&spec, &budget, seed)?;
    let body = match which {
        ShortcutArg::Both => serde_json::to_value(&pair)?,
        ShortcutArg::Add => serde_json::to_value(pair.get(Shortcut::Add))?,
        ShortcutArg::Concat => serde_json::to_value(pair.get(Shortcut::Concat))?,
    };
    let out = json!({ "schema": "densecat.randnet_sample/v1", "seed": seed, "sample": body });
    print!("{}", pretty(&out)?);
    Ok(())
}

fn cmd_randnet_run(
    args: &SpecArgs,
    data: &DataArgs,
    config: Option<&Path>,
    pairs: usize,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let started = unix_now();
    let clock = Instant::now();
    let (spec, budget) = load_spec(args)?;
    let cfg = train_config(config)?;
    let handle = dataset_handle(data)?;
    let result = run_paired_experiment(&spec, &budget, pairs, &cfg, &handle, seed, worker_count())?;
    fs::create_dir_all(out)?;
    write_file(&out.join("runs.csv"), &result.runs_csv())?;
    write_file(&out.join("summary.json"), &pretty(&result.summary)?)?;
    write_file(&out.join("cdf.csv"), &result.cdf_csv())?;
    write_meta(out, "randnet run", started, clock)?;
    let s = &result.summary;
    println!(
        "add {:.4} ± {:.4} (n={}, failed {}), concat {:.4} ± {:.4} (n={}, failed {})",
        s.add.mean, s.add.std, s.add.count, s.add.failures, s.concat.mean, s.concat.std, s.concat.count, s.concat.failures
    );
    println!(
        "sign test: concat wins {} losses {} ties {} p={:.4}",
        s.sign_test.wins, s.sign_test.losses, s.sign_test.ties, s.sign_test.p_value
    );
    Ok(())
}

fn features_of(ckpt: &Path, args: &FeatureArgs) -> Result<Vec<densecat::analysis::FeatureMatrix>, Failure> {
    let (graph, mut params) = load_checkpoint(ckpt)?;
    let handle = dataset_handle(&args.data)?.with_split(Split::Test);
    let mut data = load_dataset(&handle)?;
    if args.samples < 1 {
        return Err(Failure::Usage("--samples must be ≥ 1".into()));
    }
    data.truncate(args.samples);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, _) = data.batch(&idx)?;
    let layers: Vec<String> = args.layers.split(',').map(|s| s.trim().to_string()).collect();
    Ok(capture_features(&ckpt.display().to_string(), &graph, &mut params, x, &layers)?)
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Describe { model, input, json } => cmd_describe(&model, input, json.as_deref()),
        Command::Count { model, input, out } => cmd_count(&model, input, out.as_deref()),
        Command::Gradcheck {
            ops,
            seed,
            step,
            inject_fault,
        } => cmd_gradcheck(&ops, seed, step, inject_fault),
        Command::Train {
            model,
            data,
            config,
            epochs,
            seed,
            out,
            checkpoint,
        } => cmd_train(&model, &data, config.as_deref(), epochs, seed, &out, checkpoint),
        Command::Randnet { action } => match action {
            RandnetAction::Sample { spec, seed, shortcut } => cmd_randnet_sample(&spec, seed, shortcut),
            RandnetAction::Run {
                spec,
                data,
                config,
                pairs,
                seed,
                out,
            } => cmd_randnet_run(&spec, &data, config.as_deref(), pairs, seed, &out),
        },
        Command::Analyze { action } => match action {
            AnalyzeAction::Cka { features, against } => {
                let a = features_of(&features.checkpoint, &features)?;
                let b = match &against {
                    Some(p) => features_of(p, &features)?,
                    None => a.clone(),
                };
                emit(features.out.as_deref(), &cka_csv(&cka_grid(&a, &b)?))
            }
            AnalyzeAction::Rank { features, tol } => {
                let f = features_of(&features.checkpoint, &features)?;
                let tol = tol.unwrap_or_else(|| default_rank_tol(f.first().map_or(1, |m| m.rows())));
                emit(features.out.as_deref(), &rank_csv(&f, tol)?)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Budget(m)) => {
            eprintln!("budget failure: {m}");
            ExitCode::from(3)
        }
    }
}
