//! Command-line front end: registry inspection, mask dumps, training,
//! fine-tuning, Monte Carlo evaluation, attention analysis, and MAC
//! accounting, glued together by a layered configuration.
//!
//! Settings resolve in precedence order: explicit flags beat `--set`
//! overrides, which beat the `--config` file, which beats profile defaults.
//! Every run that writes artifacts also writes a `manifest.txt` holding the
//! fully resolved configuration plus SHA-256 hashes of the produced files, and
//! a manifest is itself a valid `--config` file, so any run can be repeated
//! exactly from its manifest.
//!
//! Exit codes: 0 success, 2 usage or configuration errors, 3 data errors
//! (missing or malformed files), 4 numerical failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::alist::{load_parity_check, MatrixFormat};
use crate::analysis::{head_similarity, mac_report, probe_dump, rank_analysis, write_attention_dump};
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    monte_carlo, BpDecoder, EvalReport, EvalSettings, HardDecision, MlOracle, PointReport,
    UecctDecoder, BP_DEFAULT_ITERS,
};
use crate::gf2::{
    builtin_code, hamming15_11, hamming74, ldpc49_24, repetition21, rm32_16, CodeRegistry,
    CodeSpec, BUILTIN_CODE_NAMES,
};
use crate::mask::{build_extended, density};
use crate::model::{AttentionVariant, CodeAttention, ForwardOptions, ModelConfig, UecctModel};
use crate::train::{fine_tune, seed_rng, train, FreezePolicy, TrainConfig, TrainRun};

/// Parse `args` (including the program name) and run the selected subcommand.
/// Returns the process exit code instead of exiting, so tests can call it.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match run(&cli) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error[{}]: {}", err.class(), error_message(&err));
                err.exit_code()
            }
        },
        Err(err) => {
            // Help and version requests print to stdout and succeed; genuine
            // usage errors go to stderr with the config exit code.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            code
        }
    }
}

/// The error's message without its class prefix; the class is already carried
/// by the `error[class]:` tag.
fn error_message(err: &Error) -> String {
    match err {
        Error::Config(m) | Error::Data(m) | Error::Numerical(m) => m.clone(),
        Error::Io(e) => e.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "uecct",
    version,
    about = "Unified transformer decoding for binary linear block codes"
)]
struct Cli {
    /// Configuration file (sectioned key = value text, e.g. a manifest.txt)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. --set train.epochs=2
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect builtin codes or validate a parity-check matrix file
    Codes {
        #[command(subcommand)]
        cmd: CodesCmd,
    },
    /// Inspect the extended parity-check matrix behind a code's mask
    Mask {
        #[command(subcommand)]
        cmd: MaskCmd,
    },
    /// Train a model from scratch
    Train(TrainArgs),
    /// Continue training from a checkpoint, optionally freezing parameters
    Finetune(FinetuneArgs),
    /// Monte Carlo BER/BLER evaluation of a decoder
    Eval(EvalArgs),
    /// Attention statistics probed from a checkpoint
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
    /// Multiply-accumulate counts for one decode, sparse versus dense
    Macs(MacsArgs),
}

#[derive(Subcommand, Debug)]
enum CodesCmd {
    /// List builtin codes as CSV
    List,
    /// Parse and validate a parity-check matrix file
    Add(CodesAddArgs),
}

#[derive(Args, Debug)]
struct CodesAddArgs {
    /// Matrix file (.alist or dense 0/1 rows)
    file: PathBuf,
    /// Code name (defaults to the file stem)
    #[arg(long)]
    name: Option<String>,
    /// alist | dense01 (defaults from the file extension)
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand, Debug)]
enum MaskCmd {
    /// Print the extended parity-check matrix rows and their density
    Show {
        /// Builtin code name, matrix file path, or name=path
        code: String,
    },
}

/// Training-schedule flags shared by `train` and `finetune`.
#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Code to include: builtin name, matrix file path, or name=path
    /// (repeat or comma-separate for several)
    #[arg(long = "code", alias = "codes", value_delimiter = ',')]
    codes: Vec<String>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Batches per epoch
    #[arg(long)]
    batches: Option<usize>,
    /// Samples per batch
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule
    #[arg(long = "lr-init")]
    lr_init: Option<f64>,
    /// Final learning rate of the cosine schedule
    #[arg(long = "lr-final")]
    lr_final: Option<f64>,
    /// Master seed for initialization and batch sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Train without the parity mask (ablation arm)
    #[arg(long)]
    unmasked: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory for checkpoints, loss.csv, and manifest.txt
    #[arg(long)]
    out: PathBuf,
    /// Size preset: toy (2 layers x 2 heads, 50x50x128 schedule) or
    /// full (6 layers x 8 heads, 1000x1000x512 schedule)
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Transformer layers
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Per-head key width
    #[arg(long = "d-k")]
    d_k: Option<usize>,
    /// Feed-forward width
    #[arg(long = "d-f")]
    d_f: Option<usize>,
    /// Use standard multi-head attention instead of the shared unified module
    #[arg(long)]
    vanilla: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Checkpoint to start from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for checkpoints, loss.csv, and manifest.txt
    #[arg(long)]
    out: PathBuf,
    /// Parameters to freeze: none | attention | all-but-head
    #[arg(long)]
    freeze: Option<String>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// hard | ml | bp | uecct
    #[arg(long)]
    decoder: Option<String>,
    /// Code to evaluate (repeat or comma-separate for several)
    #[arg(long = "code", alias = "codes", value_delimiter = ',')]
    codes: Vec<String>,
    /// Eb/N0 grid in dB (comma-separated)
    #[arg(long, value_delimiter = ',')]
    ebn0: Vec<f64>,
    /// Blocks per operating point
    #[arg(long)]
    blocks: Option<u64>,
    /// Noise seed
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation worker threads
    #[arg(long)]
    workers: Option<usize>,
    /// Belief-propagation iteration cap
    #[arg(long = "bp-iters")]
    bp_iters: Option<usize>,
    /// Model checkpoint (required by --decoder uecct)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run the model without its parity mask (ablation arm)
    #[arg(long)]
    unmasked: bool,
    /// Directory for eval.csv and manifest.txt (stdout only when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Numerical rank of each layer/head attention map on a noiseless probe
    Rank(AnalyzeArgs),
    /// Mean pairwise Jensen-Shannon divergence between heads, per layer
    Jsd(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Checkpoint to inspect
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe code (defaults to the checkpoint's first code)
    #[arg(long)]
    code: Option<String>,
    /// Probe without the parity mask
    #[arg(long)]
    unmasked: bool,
    /// Directory for the attention dump, stats CSV, and manifest.txt
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MacsArgs {
    /// Checkpoint to measure (otherwise a fresh profile model is used;
    /// weights do not affect MAC counts)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Registry codes; the first one is the code measured
    #[arg(long = "code", alias = "codes", value_delimiter = ',')]
    codes: Vec<String>,
    /// toy | full, sizing the fresh model when no checkpoint is given
    #[arg(long)]
    profile: Option<String>,
    /// Seed for the fresh model
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> Result<()> {
    let rc = layered_config(cli)?;
    match &cli.command {
        Command::Codes { cmd: CodesCmd::List } => run_codes_list(),
        Command::Codes { cmd: CodesCmd::Add(args) } => run_codes_add(args),
        Command::Mask { cmd: MaskCmd::Show { code } } => run_mask_show(code),
        Command::Train(args) => run_train(&rc, args),
        Command::Finetune(args) => run_finetune(&rc, args),
        Command::Eval(args) => run_eval(&rc, args),
        Command::Analyze { cmd } => run_analyze(&rc, cmd),
        Command::Macs(args) => run_macs(&rc, args),
    }
}

/// Keys a config file or `--set` override may mention. Covers both the keys
/// commands read and the extra keys manifests record, so a manifest.txt can be
/// replayed as a config file; anything else is a schema error.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("run", "command"),
    ("run", "version"),
    ("train", "profile"),
    ("train", "codes"),
    ("train", "epochs"),
    ("train", "batches"),
    ("train", "batch_size"),
    ("train", "lr_init"),
    ("train", "lr_final"),
    ("train", "seed"),
    ("train", "snr_min"),
    ("train", "snr_max"),
    ("train", "masked"),
    ("train", "freeze"),
    ("train", "checkpoint_sha256"),
    ("model", "layers"),
    ("model", "heads"),
    ("model", "d_k"),
    ("model", "d_l"),
    ("model", "d_f"),
    ("model", "n_max"),
    ("model", "s_max"),
    ("model", "variant"),
    ("eval", "decoder"),
    ("eval", "codes"),
    ("eval", "ebn0"),
    ("eval", "blocks"),
    ("eval", "seed"),
    ("eval", "workers"),
    ("eval", "bp_iters"),
    ("eval", "masked"),
    ("eval", "checkpoint"),
    ("eval", "checkpoint_sha256"),
    ("analyze", "code"),
    ("analyze", "masked"),
    ("analyze", "checkpoint_sha256"),
    ("macs", "codes"),
    ("macs", "profile"),
    ("macs", "seed"),
];

/// Config file merged with `--set` overrides (overrides win), checked against
/// the known-key schema. Artifact hashes from replayed manifests are allowed
/// through without interpretation.
fn layered_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::data(format!("cannot read config '{}': {e}", path.display()))
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::new(),
    };
    for dotted in &cli.set {
        rc.apply_override(dotted)?;
    }
    for section in rc.section_names() {
        if section == "artifacts" {
            continue;
        }
        for key in rc.keys(section) {
            if !KNOWN_KEYS.contains(&(section, key)) {
                return Err(Error::config(format!(
                    "unknown config key '{key}' in section '[{section}]'"
                )));
            }
        }
    }
    Ok(rc)
}

/// Flag value if given, else the config value, else the default.
fn resolve<T>(flag: Option<T>, rc: &RunConfig, section: &str, key: &str, default: T) -> Result<T>
where
    T: std::str::FromStr,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(rc.get_parsed(section, key)?.unwrap_or(default)),
    }
}

/// List-valued settings: a non-empty flag list wins, else a comma-separated
/// config value, else the default.
fn resolve_list(flag: &[String], rc: &RunConfig, section: &str, key: &str, default: &[&str]) -> Vec<String> {
    if !flag.is_empty() {
        return flag.to_vec();
    }
    if let Some(text) = rc.get(section, key) {
        let items: Vec<String> = text
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if !items.is_empty() {
            return items;
        }
    }
    default.iter().map(|s| s.to_string()).collect()
}

fn resolve_f64_list(flag: &[f64], rc: &RunConfig, section: &str, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    if !flag.is_empty() {
        return Ok(flag.to_vec());
    }
    if let Some(text) = rc.get(section, key) {
        let mut items = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            items.push(part.parse::<f64>().map_err(|_| {
                Error::config(format!("cannot parse [{section}] {key} entry '{part}' as a number"))
            })?);
        }
        if !items.is_empty() {
            return Ok(items);
        }
    }
    Ok(default.to_vec())
}

/// The `--unmasked` flag forces the mask off; otherwise the config decides,
/// defaulting to masked.
fn resolve_masked(unmasked_flag: bool, rc: &RunConfig, section: &str) -> Result<bool> {
    if unmasked_flag {
        return Ok(false);
    }
    Ok(rc.get_parsed::<bool>(section, "masked")?.unwrap_or(true))
}

/// A code entry is a builtin name, a matrix file path, or `name=path`.
fn resolve_code(entry: &str) -> Result<CodeSpec> {
    if let Some(code) = builtin_code(entry) {
        return Ok(code);
    }
    match entry.split_once('=') {
        Some((name, path)) if !name.trim().is_empty() => {
            load_code_file(Path::new(path.trim()), Some(name.trim()), None)
        }
        _ => {
            let path = Path::new(entry);
            if !path.exists() {
                return Err(Error::config(format!(
                    "unknown code '{entry}': not one of the builtins ({}) and not a file; \
                     custom codes are 'path' or 'name=path'",
                    BUILTIN_CODE_NAMES.join(", ")
                )));
            }
            load_code_file(path, None, None)
        }
    }
}

fn load_code_file(path: &Path, name: Option<&str>, format: Option<MatrixFormat>) -> Result<CodeSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read '{}': {e}", path.display())))?;
    let format = match format {
        Some(f) => f,
        None => format_from_extension(path)?,
    };
    let h = load_parity_check(&text, format)?;
    let name = match name {
        Some(n) => n.to_string(),
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| {
                Error::config(format!("cannot derive a code name from '{}'", path.display()))
            })?,
    };
    CodeSpec::new(name, h)
}

fn format_from_extension(path: &Path) -> Result<MatrixFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("alist") => Ok(MatrixFormat::Alist),
        Some("txt") | Some("dense01") => Ok(MatrixFormat::Dense01),
        _ => Err(Error::config(format!(
            "cannot infer the matrix format of '{}'; pass --format alist|dense01 \
             or use an .alist/.txt/.dense01 extension",
            path.display()
        ))),
    }
}

fn build_registry(entries: &[String]) -> Result<CodeRegistry> {
    if entries.is_empty() {
        return Err(Error::config("no codes selected; pass --code"));
    }
    let mut registry = CodeRegistry::new();
    for entry in entries {
        registry.register(resolve_code(entry)?)?;
    }
    Ok(registry)
}

/// Registry sized for an existing model: its codes must fit the model's
/// padded geometry, and the registry is padded up to match it exactly.
fn registry_for_model(entries: &[String], config: &ModelConfig) -> Result<CodeRegistry> {
    let mut registry = build_registry(entries)?;
    if registry.n_max() > config.n_max || registry.s_max() > config.s_max {
        return Err(Error::config(format!(
            "selected codes need n_max {} / s_max {} but the checkpoint provides {} / {}",
            registry.n_max(),
            registry.s_max(),
            config.n_max,
            config.s_max
        )));
    }
    registry.pad_to(config.n_max, config.s_max);
    Ok(registry)
}

/// Model dimensions for a named profile, sized to the registry geometry.
fn model_profile(profile: &str, n_max: usize, s_max: usize) -> Result<ModelConfig> {
    let mut mc = ModelConfig::toy(n_max, s_max);
    match profile {
        "toy" => {}
        "full" => {
            mc.layers = 6;
            mc.heads = 8;
            mc.d_k = 64;
            mc.d_f = 4 * mc.heads * mc.d_k;
        }
        other => {
            return Err(Error::config(format!(
                "unknown profile '{other}' (expected toy or full)"
            )))
        }
    }
    Ok(mc)
}

fn schedule_profile(profile: &str, seed: u64, code_names: Vec<String>) -> Result<TrainConfig> {
    match profile {
        "toy" => Ok(TrainConfig::toy(seed, code_names)),
        "full" => Ok(TrainConfig::full_scale(seed, code_names)),
        other => Err(Error::config(format!(
            "unknown profile '{other}' (expected toy or full)"
        ))),
    }
}

fn resolve_schedule(
    rc: &RunConfig,
    s: &ScheduleArgs,
    profile: &str,
    code_names: Vec<String>,
) -> Result<TrainConfig> {
    let seed = resolve(s.seed, rc, "train", "seed", 0u64)?;
    let mut tc = schedule_profile(profile, seed, code_names)?;
    tc.epochs = resolve(s.epochs, rc, "train", "epochs", tc.epochs)?;
    tc.batches_per_epoch = resolve(s.batches, rc, "train", "batches", tc.batches_per_epoch)?;
    tc.batch_size = resolve(s.batch_size, rc, "train", "batch_size", tc.batch_size)?;
    tc.lr_init = resolve(s.lr_init, rc, "train", "lr_init", tc.lr_init)?;
    tc.lr_final = resolve(s.lr_final, rc, "train", "lr_final", tc.lr_final)?;
    tc.snr_range_db.0 = resolve(None, rc, "train", "snr_min", tc.snr_range_db.0)?;
    tc.snr_range_db.1 = resolve(None, rc, "train", "snr_max", tc.snr_range_db.1)?;
    Ok(tc)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read '{}': {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

fn manifest_base(command: &str) -> RunConfig {
    let mut eff = RunConfig::new();
    eff.set("run", "command", command);
    eff.set("run", "version", env!("CARGO_PKG_VERSION"));
    eff
}

/// Record artifact hashes and write `manifest.txt` into `dir`.
fn write_manifest(dir: &Path, mut eff: RunConfig, artifacts: &[(String, PathBuf)]) -> Result<()> {
    for (name, path) in artifacts {
        eff.set("artifacts", name, sha256_file(path)?);
    }
    fs::write(dir.join("manifest.txt"), eff.to_text())?;
    Ok(())
}

fn set_model_section(eff: &mut RunConfig, mc: &ModelConfig) {
    eff.set("model", "layers", mc.layers);
    eff.set("model", "heads", mc.heads);
    eff.set("model", "d_k", mc.d_k);
    eff.set("model", "d_l", mc.d_l);
    eff.set("model", "d_f", mc.d_f);
    eff.set("model", "n_max", mc.n_max);
    eff.set("model", "s_max", mc.s_max);
    eff.set("model", "variant", mc.variant.name());
}

fn set_train_section(
    eff: &mut RunConfig,
    tc: &TrainConfig,
    entries: &[String],
    masked: bool,
    profile: Option<&str>,
) {
    if let Some(p) = profile {
        eff.set("train", "profile", p);
    }
    eff.set("train", "codes", entries.join(","));
    eff.set("train", "epochs", tc.epochs);
    eff.set("train", "batches", tc.batches_per_epoch);
    eff.set("train", "batch_size", tc.batch_size);
    eff.set("train", "lr_init", tc.lr_init);
    eff.set("train", "lr_final", tc.lr_final);
    eff.set("train", "snr_min", tc.snr_range_db.0);
    eff.set("train", "snr_max", tc.snr_range_db.1);
    eff.set("train", "seed", tc.seed);
    eff.set("train", "masked", masked);
}

fn train_artifacts(out: &Path, run: &TrainRun) -> Vec<(String, PathBuf)> {
    let mut artifacts = vec![
        ("loss.csv".to_string(), out.join("loss.csv")),
        ("model.ckpt".to_string(), out.join("model.ckpt")),
    ];
    for path in &run.checkpoints {
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            artifacts.push((name.to_string(), path.clone()));
        }
    }
    artifacts
}

fn run_codes_list() -> Result<()> {
    println!("name,n,k,rate,density");
    for code in [hamming74(), repetition21(), rm32_16(), ldpc49_24(), hamming15_11()] {
        let ext = build_extended(&code.h);
        println!(
            "{},{},{},{},{}",
            code.name,
            code.n,
            code.k,
            code.rate(),
            density(&ext)
        );
    }
    Ok(())
}

fn run_codes_add(args: &CodesAddArgs) -> Result<()> {
    let format = match &args.format {
        Some(name) => Some(MatrixFormat::from_name(name)?),
        None => None,
    };
    let code = load_code_file(&args.file, args.name.as_deref(), format)?;
    let ext = build_extended(&code.h);
    println!("name = {}", code.name);
    println!("n = {}", code.n);
    println!("k = {}", code.k);
    println!("rate = {}", code.rate());
    println!("syndrome_bits = {}", ext.s);
    println!("density = {}", density(&ext));
    println!(
        "valid; use it in runs as --code {}={}",
        code.name,
        args.file.display()
    );
    Ok(())
}

fn run_mask_show(entry: &str) -> Result<()> {
    let code = resolve_code(entry)?;
    let ext = build_extended(&code.h);
    let mut out = String::new();
    for r in 0..ext.matrix.rows() {
        let row: Vec<String> = ext.matrix.row(r).iter().map(|b| b.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    print!("{out}");
    println!("density = {}", density(&ext));
    Ok(())
}

fn run_train(rc: &RunConfig, args: &TrainArgs) -> Result<()> {
    let profile = resolve(args.profile.clone(), rc, "train", "profile", "toy".to_string())?;
    let entries = resolve_list(&args.schedule.codes, rc, "train", "codes", &["hamming74", "rm32_16"]);
    let registry = build_registry(&entries)?;
    let names: Vec<String> = registry.codes().iter().map(|c| c.name.clone()).collect();
    let tc = resolve_schedule(rc, &args.schedule, &profile, names)?;
    let masked = resolve_masked(args.schedule.unmasked, rc, "train")?;

    let mut mc = model_profile(&profile, registry.n_max(), registry.s_max())?;
    mc.layers = resolve(args.layers, rc, "model", "layers", mc.layers)?;
    mc.heads = resolve(args.heads, rc, "model", "heads", mc.heads)?;
    mc.d_k = resolve(args.d_k, rc, "model", "d_k", mc.d_k)?;
    mc.d_f = resolve(args.d_f, rc, "model", "d_f", 4 * mc.heads * mc.d_k)?;
    let variant = if args.vanilla {
        "vanilla".to_string()
    } else {
        resolve(None, rc, "model", "variant", mc.variant.name().to_string())?
    };
    mc.variant = AttentionVariant::from_name(&variant)?;

    fs::create_dir_all(&args.out)?;
    let run = train(&registry, mc, &tc, masked, Some(&args.out))?;

    let mut eff = manifest_base("train");
    set_model_section(&mut eff, &mc);
    set_train_section(&mut eff, &tc, &entries, masked, Some(&profile));
    write_manifest(&args.out, eff, &train_artifacts(&args.out, &run))?;

    println!(
        "trained on {} for {} epochs x {} batches x {} samples",
        entries.join(","),
        tc.epochs,
        tc.batches_per_epoch,
        tc.batch_size
    );
    println!(
        "final epoch loss = {} (all-half baseline = {})",
        run.final_epoch_loss, run.final_epoch_baseline
    );
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn run_finetune(rc: &RunConfig, args: &FinetuneArgs) -> Result<()> {
    let entries = resolve_list(&args.schedule.codes, rc, "train", "codes", &[]);
    if entries.is_empty() {
        return Err(Error::config("finetune needs at least one --code"));
    }
    let registry = build_registry(&entries)?;
    let names: Vec<String> = registry.codes().iter().map(|c| c.name.clone()).collect();
    let tc = resolve_schedule(rc, &args.schedule, "toy", names)?;
    let masked = resolve_masked(args.schedule.unmasked, rc, "train")?;
    let freeze_name = resolve(args.freeze.clone(), rc, "train", "freeze", "none".to_string())?;
    let freeze = FreezePolicy::from_name(&freeze_name)?;

    let ckpt_hash = sha256_file(&args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mc = ckpt.config;

    fs::create_dir_all(&args.out)?;
    let run = fine_tune(ckpt, &registry, &tc, freeze, masked, Some(&args.out))?;

    let mut eff = manifest_base("finetune");
    set_model_section(&mut eff, &mc);
    set_train_section(&mut eff, &tc, &entries, masked, None);
    eff.set("train", "freeze", freeze.name());
    eff.set("train", "checkpoint_sha256", ckpt_hash);
    write_manifest(&args.out, eff, &train_artifacts(&args.out, &run))?;

    println!(
        "fine-tuned on {} for {} epochs x {} batches x {} samples (freeze = {})",
        entries.join(","),
        tc.epochs,
        tc.batches_per_epoch,
        tc.batch_size,
        freeze.name()
    );
    println!(
        "final epoch loss = {} (all-half baseline = {})",
        run.final_epoch_loss, run.final_epoch_baseline
    );
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn run_eval(rc: &RunConfig, args: &EvalArgs) -> Result<()> {
    let decoder_name = match args
        .decoder
        .clone()
        .or_else(|| rc.get("eval", "decoder").map(str::to_string))
    {
        Some(d) => d,
        None => return Err(Error::config("select a decoder: --decoder hard|ml|bp|uecct")),
    };
    let ebn0 = resolve_f64_list(&args.ebn0, rc, "eval", "ebn0", &[4.0, 5.0, 6.0])?;
    let settings = EvalSettings {
        min_blocks: resolve(args.blocks, rc, "eval", "blocks", 10_000u64)?,
        seed: resolve(args.seed, rc, "eval", "seed", 0u64)?,
        workers: resolve(args.workers, rc, "eval", "workers", 1usize)?,
    };
    let bp_iters = resolve(args.bp_iters, rc, "eval", "bp_iters", BP_DEFAULT_ITERS)?;
    let masked = resolve_masked(args.unmasked, rc, "eval")?;

    let mut eff = manifest_base("eval");
    eff.set("eval", "decoder", &decoder_name);
    eff.set(
        "eval",
        "ebn0",
        ebn0.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    eff.set("eval", "blocks", settings.min_blocks);
    eff.set("eval", "seed", settings.seed);
    eff.set("eval", "workers", settings.workers);

    let mut points: Vec<PointReport> = Vec::new();
    let entries: Vec<String>;
    match decoder_name.as_str() {
        "uecct" => {
            let ckpt_path = match args
                .checkpoint
                .clone()
                .or_else(|| rc.get("eval", "checkpoint").map(PathBuf::from))
            {
                Some(p) => p,
                None => return Err(Error::config("--decoder uecct needs --checkpoint")),
            };
            eff.set("eval", "checkpoint_sha256", sha256_file(&ckpt_path)?);
            eff.set("eval", "masked", masked);
            let ckpt = load_checkpoint(&ckpt_path)?;
            let ckpt_names = ckpt.code_names.clone();
            let model = ckpt.into_model()?;
            let flagged = resolve_list(&args.codes, rc, "eval", "codes", &[]);
            entries = if flagged.is_empty() { ckpt_names } else { flagged };
            let registry = registry_for_model(&entries, model.config())?;
            let attns = CodeAttention::for_registry(&registry, model.config())?;
            let opts = ForwardOptions {
                masked,
                sparse: masked,
                dump_attention: false,
            };
            let decoder = UecctDecoder::new(&model, &registry, &attns, opts);
            for code in registry.codes() {
                points.extend(monte_carlo(&decoder, code, &ebn0, &settings)?.points);
            }
        }
        "hard" | "ml" | "bp" => {
            entries = resolve_list(&args.codes, rc, "eval", "codes", &["hamming74"]);
            let registry = build_registry(&entries)?;
            if decoder_name == "bp" {
                eff.set("eval", "bp_iters", bp_iters);
            }
            for code in registry.codes() {
                let report = match decoder_name.as_str() {
                    "hard" => monte_carlo(&HardDecision, code, &ebn0, &settings)?,
                    "ml" => monte_carlo(&MlOracle::new(code)?, code, &ebn0, &settings)?,
                    _ => monte_carlo(&BpDecoder::new(code, bp_iters), code, &ebn0, &settings)?,
                };
                points.extend(report.points);
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown decoder '{other}' (expected hard, ml, bp, or uecct)"
            )))
        }
    }
    eff.set("eval", "codes", entries.join(","));

    let report = EvalReport {
        decoder: decoder_name,
        points,
    };
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.csv"), &csv)?;
        write_manifest(out, eff, &[("eval.csv".to_string(), out.join("eval.csv"))])?;
    }
    Ok(())
}

fn run_analyze(rc: &RunConfig, cmd: &AnalyzeCmd) -> Result<()> {
    let (kind, args) = match cmd {
        AnalyzeCmd::Rank(a) => ("rank", a),
        AnalyzeCmd::Jsd(a) => ("jsd", a),
    };
    let ckpt_hash = sha256_file(&args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let first_name = ckpt.code_names.first().cloned();
    let model = ckpt.into_model()?;
    let entry = match args
        .code
        .clone()
        .or_else(|| rc.get("analyze", "code").map(str::to_string))
        .or(first_name)
    {
        Some(e) => e,
        None => return Err(Error::data("the checkpoint lists no codes; pass --code")),
    };
    let registry = registry_for_model(std::slice::from_ref(&entry), model.config())?;
    let attns = CodeAttention::for_registry(&registry, model.config())?;
    let code = &registry.codes()[0];
    let masked = !args.unmasked;
    let dump = probe_dump(&model, &registry, &attns, code, masked)?;

    let stats_csv = match kind {
        "rank" => {
            let mut csv = String::from("layer,head,rank\n");
            for (layer, heads) in rank_analysis(&dump).iter().enumerate() {
                for (head, rank) in heads.iter().enumerate() {
                    csv.push_str(&format!("{layer},{head},{rank}\n"));
                }
            }
            csv
        }
        _ => {
            let mut csv = String::from("layer,mean_pairwise_jsd\n");
            for (layer, value) in head_similarity(&dump).iter().enumerate() {
                csv.push_str(&format!("{layer},{value}\n"));
            }
            csv
        }
    };
    print!("{stats_csv}");

    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let stats_name = format!("{kind}.csv");
        fs::write(out.join(&stats_name), &stats_csv)?;
        let (dump_bin, dump_manifest) = write_attention_dump(&dump, out)?;
        let mut eff = manifest_base(&format!("analyze-{kind}"));
        eff.set("analyze", "checkpoint_sha256", ckpt_hash);
        eff.set("analyze", "code", &entry);
        eff.set("analyze", "masked", masked);
        let mut artifacts = vec![(stats_name.clone(), out.join(&stats_name))];
        for path in [dump_bin, dump_manifest] {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                artifacts.push((name.to_string(), path.clone()));
            }
        }
        write_manifest(out, eff, &artifacts)?;
    }
    Ok(())
}

fn run_macs(rc: &RunConfig, args: &MacsArgs) -> Result<()> {
    let (model, default_entries) = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let names = ckpt.code_names.clone();
            (ckpt.into_model()?, names)
        }
        None => {
            let entries = resolve_list(&args.codes, rc, "macs", "codes", &["hamming74", "rm32_16"]);
            let registry = build_registry(&entries)?;
            let profile = resolve(args.profile.clone(), rc, "macs", "profile", "toy".to_string())?;
            let mc = model_profile(&profile, registry.n_max(), registry.s_max())?;
            let seed = resolve(args.seed, rc, "macs", "seed", 0u64)?;
            (UecctModel::init(mc, &mut seed_rng(seed))?, entries)
        }
    };
    let flagged = resolve_list(&args.codes, rc, "macs", "codes", &[]);
    let entries = if flagged.is_empty() { default_entries } else { flagged };
    let registry = registry_for_model(&entries, model.config())?;
    let attns = CodeAttention::for_registry(&registry, model.config())?;
    let code = &registry.codes()[0];
    let report = mac_report(&model, &registry, &attns, code)?;

    println!("phase,macs");
    println!("attn_core_sparse,{}", report.sparse_core);
    println!("attn_core_dense,{}", report.dense_core);
    println!("vproj,{}", report.vproj);
    println!("attn_out,{}", report.attn_out);
    println!("ffn,{}", report.ffn);
    println!("head,{}", report.head);
    println!("other,{}", report.other);
    println!("total_sparse,{}", report.total_sparse());
    println!("total_dense,{}", report.total_dense());
    println!("core_ratio = {}", report.core_ratio());
    println!("padded_density = {}", report.padded_density);
    println!("core_reduction_percent = {}", report.core_reduction_percent());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_inference_follows_extensions() {
        assert_eq!(
            format_from_extension(Path::new("h.alist")).unwrap(),
            MatrixFormat::Alist
        );
        assert_eq!(
            format_from_extension(Path::new("h.txt")).unwrap(),
            MatrixFormat::Dense01
        );
        assert_eq!(
            format_from_extension(Path::new("h.dense01")).unwrap(),
            MatrixFormat::Dense01
        );
        assert!(format_from_extension(Path::new("h.bin")).is_err());
        assert!(format_from_extension(Path::new("noext")).is_err());
    }

    #[test]
    fn resolve_prefers_flag_over_config_over_default() {
        let mut rc = RunConfig::new();
        rc.set("train", "epochs", 7);
        assert_eq!(resolve(Some(3usize), &rc, "train", "epochs", 1).unwrap(), 3);
        assert_eq!(resolve(None::<usize>, &rc, "train", "epochs", 1).unwrap(), 7);
        assert_eq!(resolve(None::<usize>, &rc, "train", "batches", 1).unwrap(), 1);
        rc.set("train", "epochs", "many");
        assert!(resolve(None::<usize>, &rc, "train", "epochs", 1).is_err());
    }

    #[test]
    fn resolve_list_falls_back_in_order() {
        let mut rc = RunConfig::new();
        assert_eq!(resolve_list(&[], &rc, "eval", "codes", &["a", "b"]), vec!["a", "b"]);
        rc.set("eval", "codes", "x, y,");
        assert_eq!(resolve_list(&[], &rc, "eval", "codes", &["a"]), vec!["x", "y"]);
        let flag = vec!["z".to_string()];
        assert_eq!(resolve_list(&flag, &rc, "eval", "codes", &["a"]), vec!["z"]);
    }

    #[test]
    fn unknown_code_entry_names_the_builtins() {
        let err = resolve_code("no-such-code").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("hamming74"), "{message}");
        assert!(message.contains("ldpc49_24"), "{message}");
    }

    #[test]
    fn builtin_entries_resolve_without_files() {
        let code = resolve_code("rep21").unwrap();
        assert_eq!((code.n, code.k), (2, 1));
    }

    #[test]
    fn full_profile_dimensions() {
        let mc = model_profile("full", 49, 25).unwrap();
        assert_eq!(
            (mc.layers, mc.heads, mc.d_k, mc.d_f, mc.d_l),
            (6, 8, 64, 2048, 25)
        );
        assert!(model_profile("huge", 7, 3).is_err());
    }

    #[test]
    fn layered_config_rejects_unknown_keys_but_accepts_manifests() {
        let cli = Cli::try_parse_from(["uecct", "--set", "train.epochs=2", "codes", "list"]).unwrap();
        assert!(layered_config(&cli).is_ok());
        let cli = Cli::try_parse_from(["uecct", "--set", "train.epoch=2", "codes", "list"]).unwrap();
        let err = layered_config(&cli).unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");

        let mut manifest = manifest_base("train");
        manifest.set("artifacts", "loss.csv", "0f");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        fs::write(&path, manifest.to_text()).unwrap();
        let cli = Cli::try_parse_from([
            "uecct",
            "--config",
            path.to_str().unwrap(),
            "codes",
            "list",
        ])
        .unwrap();
        assert!(layered_config(&cli).is_ok());
    }

    #[test]
    fn masked_resolution_gives_the_flag_priority() {
        let mut rc = RunConfig::new();
        assert!(resolve_masked(false, &rc, "train").unwrap());
        assert!(!resolve_masked(true, &rc, "train").unwrap());
        rc.set("train", "masked", false);
        assert!(!resolve_masked(false, &rc, "train").unwrap());
    }
}
