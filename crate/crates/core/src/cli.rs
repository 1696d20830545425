//! `promptseg` command line: generate, train, eval.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing inputs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::eval_harness::{emit_report, report_text, run_experiment, ExperimentOptions};
use crate::prompt_encoders::{Strategy, TextMode};
use crate::synth_data::{dataset_hash, generate_dataset, Dataset, SceneConfig, Split, SplitCounts, MANIFEST_FILE};
use crate::task_engine::{PromptBank, Regime};
use crate::trainer::{train, Preset, TrainConfig};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const RUN_MANIFEST: &str = "run_manifest.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Parser, Debug)]
#[command(name = "promptseg", version, about = "Prompt-guided multi-task segmentation of synthetic tissue scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate every checkpoint under a directory and write reports.
    #[command(alias = "report")]
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    /// Scene configuration (TOML); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Multiplier applied to the reference split counts.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Dataset seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// one_set, two_set or free_text.
    #[arg(long)]
    strategy: Option<String>,
    /// complete or incomplete.
    #[arg(long)]
    regime: Option<String>,
    /// frozen or lora (free_text only).
    #[arg(long)]
    text_mode: Option<String>,
    /// desk or paper schedule.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Training config (TOML); command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    /// Keep only task 1 for dt/capsule in the incomplete regime.
    #[arg(long)]
    task1_only: bool,
    /// Prompt bank JSON replacing the bundled one.
    #[arg(long)]
    prompt_bank: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Only print the final summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Directory searched recursively for `*.ckpt` files.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for evaluation points and prompt variants.
    #[arg(long, default_value_t = 2024)]
    eval_seed: u64,
    /// test or val.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    prompt_bank: Option<PathBuf>,
    /// Skip scoring free-text checkpoints with training prompts.
    #[arg(long)]
    no_same_prompts: bool,
    /// Overwrite existing reports and accept config-hash mismatches.
    #[arg(long)]
    force: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingInput(_) | Error::MissingFile { .. } => EXIT_MISSING,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: msg.into() }
}

fn missing(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_MISSING, message: msg.into() }
}

#[derive(Serialize)]
struct RunManifest<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    args: &'a A,
    config: &'a C,
    dataset_hash: Option<String>,
    prompt_bank_hash: Option<String>,
    started_unix_s: f64,
    finished_unix_s: f64,
    outputs: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn append_manifest<A: Serialize, C: Serialize>(dir: &Path, m: &RunManifest<A, C>) -> Result<(), Failure> {
    let path = dir.join(RUN_MANIFEST);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|source| Failure::from(Error::Io { path: path.clone(), source }))?;
    let line = serde_json::to_string(m).map_err(Error::from)?;
    writeln!(f, "{line}").map_err(|source| Failure::from(Error::Io { path, source }))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a TOML file as a partial override of `base`, table by table.
fn read_toml<T: Serialize + serde::de::DeserializeOwned>(path: &Path, base: &T) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|_| missing(format!("cannot read {}", path.display())))?;
    let over: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut merged = toml::Value::try_from(base).map_err(|e| usage(e.to_string()))?;
    merge(&mut merged, over);
    merged.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_bank(path: &Option<PathBuf>) -> Result<PromptBank, Failure> {
    match path {
        None => Ok(PromptBank::builtin()),
        Some(p) if !p.exists() => Err(missing(format!("prompt bank {} not found", p.display()))),
        Some(p) => Ok(PromptBank::from_path(p)?),
    }
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(missing(format!("no dataset manifest in {}", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let started = now();
    let mut config: SceneConfig = match &args.config {
        Some(p) => read_toml(p, &SceneConfig::default())?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let counts = SplitCounts::REFERENCE.scaled(args.scale)?;
    if args.out.join(MANIFEST_FILE).exists() && !args.force {
        return Err(usage(format!("{} already holds a dataset; pass --force to overwrite", args.out.display())));
    }
    let manifest = generate_dataset(&config, &counts, &args.out)?;
    let hash = dataset_hash(&args.out)?;
    let mpath = args.out.join(MANIFEST_FILE);
    println!("{}", mpath.display());
    println!("{} patches, dataset hash {hash}", manifest.records.len());
    append_manifest(
        &args.out,
        &RunManifest {
            command: "generate",
            args,
            config: &(config, counts),
            dataset_hash: Some(hash),
            prompt_bank_hash: None,
            started_unix_s: started,
            finished_unix_s: now(),
            outputs: vec![mpath.display().to_string()],
        },
    )
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let preset = match args.preset.as_str() {
        "desk" => Preset::Desk,
        "paper" => Preset::Paper,
        other => return Err(usage(format!("unknown preset `{other}` (desk or paper)"))),
    };
    let mut cfg = match &args.config {
        Some(p) => read_toml(p, &TrainConfig::preset(preset))?,
        None => TrainConfig::preset(preset),
    };
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(r) = &args.regime {
        cfg.regime = r.parse::<Regime>()?;
    }
    if let Some(t) = &args.text_mode {
        cfg.text_mode = t.parse::<TextMode>()?;
        if cfg.strategy != Strategy::FreeText {
            eprintln!("warning: --text-mode only applies to free_text; ignored for {}", cfg.strategy);
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = args.samples_per_epoch {
        cfg.samples_per_epoch = n;
    }
    if let Some(v) = args.val_every {
        cfg.val_every = v;
    }
    cfg.incomplete_task1_only |= args.task1_only;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let started = now();
    let cfg = build_train_config(args)?;
    let bank = load_bank(&args.prompt_bank)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    if ckpt_path.exists() && !args.force {
        return Err(usage(format!("{} exists; pass --force to overwrite", ckpt_path.display())));
    }
    let data = load_data(&args.data)?;
    let dhash = dataset_hash(&args.data)?;
    let mut cfg = cfg;
    if let Some(s) = data.samples.first() {
        cfg.model.image_size = s.patch.height;
        cfg.validate()?;
    }
    fs::create_dir_all(&args.out).map_err(|source| Failure::from(Error::Io { path: args.out.clone(), source }))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|source| Failure::from(Error::Io { path: metrics_path.clone(), source }))?;
    let quiet = args.quiet;
    let outcome = train(&cfg, &data, &bank, Some(dhash.clone()), |m| {
        if let Ok(line) = serde_json::to_string(m) {
            let _ = writeln!(metrics_file, "{line}");
        }
        if !quiet {
            match m.val_mean_dice {
                Some(v) => println!(
                    "epoch {:>4}  loss {:.4}  lr {:.2e}  val dice {:.4}  [{:.0}s]",
                    m.epoch, m.loss, m.lr, v, m.elapsed_s
                ),
                None if m.epoch % 10 == 0 => {
                    println!("epoch {:>4}  loss {:.4}  lr {:.2e}  [{:.0}s]", m.epoch, m.loss, m.lr, m.elapsed_s)
                }
                None => {}
            }
        }
    })?;
    outcome.checkpoint.save(&ckpt_path)?;
    let v = &outcome.violations;
    println!(
        "best epoch {} val dice {:.4}; checkpoint {}; violations regime={} prompt_split={} frozen_grads={}",
        outcome.best_epoch,
        outcome.best_val_dice,
        ckpt_path.display(),
        v.regime,
        v.prompt_split,
        v.frozen_grads
    );
    append_manifest(
        &args.out,
        &RunManifest {
            command: "train",
            args,
            config: &cfg,
            dataset_hash: Some(dhash),
            prompt_bank_hash: Some(bank.hash()),
            started_unix_s: started,
            finished_unix_s: now(),
            outputs: vec![ckpt_path.display().to_string(), metrics_path.display().to_string()],
        },
    )
}

/// `*.ckpt` files under `dir`, sorted.
pub fn discover_checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "ckpt") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let started = now();
    let split = match args.split.as_str() {
        "test" => Split::Test,
        "val" => Split::Val,
        other => return Err(usage(format!("unknown split `{other}` (test or val)"))),
    };
    if args.out.join("report.csv").exists() && !args.force {
        return Err(usage(format!("{} already holds a report; pass --force to overwrite", args.out.display())));
    }
    let ckpts = discover_checkpoints(&args.checkpoints);
    if ckpts.is_empty() {
        return Err(missing(format!("no checkpoints found under {}", args.checkpoints.display())));
    }
    let bank = load_bank(&args.prompt_bank)?;
    let data = load_data(&args.data)?;
    let opts = ExperimentOptions {
        eval_seed: args.eval_seed,
        split,
        include_same_prompts: !args.no_same_prompts,
        force: args.force,
    };
    let report = run_experiment(&ckpts, &data, &bank, &opts)?;
    for f in &report.failed {
        eprintln!("warning: checkpoint {} failed: {}", f.checkpoint, f.error);
    }
    let files = emit_report(&report, &args.out)?;
    print!("{}", report_text(&report));
    append_manifest(
        &args.out,
        &RunManifest {
            command: "eval",
            args,
            config: &opts.eval_seed,
            dataset_hash: Some(dataset_hash(&args.data)?),
            prompt_bank_hash: Some(bank.hash()),
            started_unix_s: started,
            finished_unix_s: now(),
            outputs: files.iter().map(|p| p.display().to_string()).collect(),
        },
    )
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
