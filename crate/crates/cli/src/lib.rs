//! `rlvr` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

pub mod config;
pub mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rlvr_core::checkpoint::Checkpoint;
use rlvr_core::env::{generate_tasks, load_dataset, save_dataset, Family};
use rlvr_core::eval::{evaluate, EvalConfig};
use rlvr_core::selection::{load_history, rank_dataset, save_history, select_top_k};
use rlvr_core::trainer::{apply_ablation, save_metrics, train, AblationFlags, RunOptions};
use rlvr_core::verifier::outcome_reward;
use rlvr_core::vocab::Vocab;

use crate::config::RunConfig;
use crate::manifest::{now, Artifacts, RunManifest, MANIFEST_FILE};

/// Overrides the default training output directory.
pub const OUT_DIR_ENV: &str = "RLVR_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "rlvr-out";

#[derive(Debug, Parser)]
#[command(name = "rlvr", version, about = "RLVR with verifiable rewards on toy arithmetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task dataset.
    GenData {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank examples by historical accuracy variance and keep the top k.
    SelectData {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run RLVR training from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one response against a label; prints 1 or 0.
    Verify {
        #[arg(long, conflicts_with = "response", required_unless_present = "response")]
        response_file: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        response: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        label: String,
    },
    /// Rerun a finished training run and compare its metrics.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    no_pg: bool,
    #[arg(long)]
    no_kl: bool,
    #[arg(long)]
    no_entropy: bool,
    #[arg(long)]
    no_wd: bool,
    #[arg(long, allow_negative_numbers = true)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    format_reward: bool,
    #[arg(long)]
    label_error_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    override_label: Option<String>,
    /// Output directory (default: $RLVR_OUT_DIR, else ./rlvr-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad flags or contradictory configuration.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}");
            // Drop the source-snippet lines some parsers add.
            let msg: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.trim_start_matches(|c: char| c.is_ascii_digit()).trim_start().starts_with(['|', '^']))
                .collect();
            eprintln!("error: {}", msg.join(" "));
            if is_usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<rlvr_core::Error>(), Some(rlvr_core::Error::Config(_)))
    })
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::GenData { family, count, seed, out } => {
            let d = generate_tasks(family, count, seed)?;
            save_dataset(&d, &out)?;
            println!("wrote {} {family} examples to {}", d.len(), out.display());
        }
        Command::SelectData { history, data, top_k, out } => {
            let h = load_history(&history)?;
            let d = load_dataset(&data)?;
            let ranked = rank_dataset(&h, &d)?;
            if top_k == 0 || top_k > ranked.len() {
                return Err(UsageError(format!("--top-k must lie in 1..={}", ranked.len())).into());
            }
            let top = select_top_k(&ranked, &d, top_k)?;
            save_dataset(&top, &out)?;
            for (i, (id, score)) in ranked.iter().take(top_k).enumerate() {
                println!("pi_{} {id} {score:.6}", i + 1);
            }
        }
        Command::Train(args) => {
            let flags = AblationFlags {
                no_pg: args.no_pg,
                no_kl: args.no_kl,
                no_entropy: args.no_entropy,
                no_wd: args.no_wd,
                entropy_coef_override: args.entropy_coef,
                format_reward: args.format_reward,
                label_override: args.override_label.clone(),
                label_error_rate: args.label_error_rate,
            };
            let mut cfg = RunConfig::load(&args.config).map_err(|e| UsageError(format!("{e:#}")))?;
            cfg.train = apply_ablation(&cfg.train, &flags)?;
            let out = args
                .out
                .clone()
                .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
            let m = run_training(&cfg, &out, argv.to_vec())?;
            let metrics = rlvr_core::trainer::load_metrics(&m.artifacts.metrics)?;
            if let Some(last) = metrics.last() {
                println!("trained {} steps; final train accuracy {:.4}", last.step, last.train_accuracy);
            }
            println!("manifest {}", out.join(MANIFEST_FILE).display());
        }
        Command::Eval { checkpoint, data, k, temperature, seed, max_len, out } => {
            let params = Checkpoint::load(&checkpoint)?.params;
            let d = load_dataset(&data)?;
            let cfg = EvalConfig { k, temperature, max_response_len: max_len, seed };
            let report = evaluate(&params, &d, &Vocab::standard(), &cfg).map_err(|e| UsageError(e.to_string()))?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => {
                    fs::write(&p, json + "\n")?;
                    let o = &report.overall;
                    println!(
                        "pass@1(avg@{k}) {:.4} pass@{k} {:.4} boxed {:.4} mean length {:.2}",
                        o.pass1_avg_k, o.pass_n, o.boxed_ratio, o.mean_response_length
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Verify { response_file, response, label } => {
            let text = match (response_file, response) {
                (Some(p), _) => fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(r)) => r,
                (None, None) => bail!(UsageError("--response-file or --response is required".into())),
            };
            println!("{}", outcome_reward(&text, &label));
        }
        Command::Replay { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new(".")).join("replay");
            let again = run_training(&m.config, &dir, argv.to_vec())?;
            let a = fs::read(&m.artifacts.metrics).with_context(|| format!("reading {}", m.artifacts.metrics.display()))?;
            let b = fs::read(&again.artifacts.metrics)?;
            if a != b {
                let old = rlvr_core::trainer::load_metrics(&m.artifacts.metrics)?;
                let new = rlvr_core::trainer::load_metrics(&again.artifacts.metrics)?;
                let step = old.iter().zip(&new).position(|(x, y)| x != y).map_or(old.len().min(new.len()), |i| i);
                bail!("metrics differ from step {} ({} vs {} records)", step + 1, old.len(), new.len());
            }
            let pa = Checkpoint::load(&m.artifacts.final_checkpoint)?;
            let pb = Checkpoint::load(&again.artifacts.final_checkpoint)?;
            if pa.to_bytes() != pb.to_bytes() {
                bail!("final parameters differ");
            }
            println!("metrics identical");
        }
    }
    Ok(())
}

/// Trains per `cfg`, writes every artifact under `out` and the manifest last.
pub fn run_training(cfg: &RunConfig, out: &Path, command: Vec<String>) -> Result<RunManifest> {
    let started_at = now();
    let (data, heldout) = cfg.load_data()?;
    let initial = cfg.initial_policy()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let out = std::path::absolute(out)?;
    let ckpt_dir = out.join("checkpoints");
    let opts = RunOptions { heldout: heldout.as_ref(), checkpoint_dir: Some(&ckpt_dir) };
    let outcome = train(&cfg.train, &data, &initial, &opts)?;

    let metrics = out.join("metrics.jsonl");
    save_metrics(&outcome.metrics, &metrics)?;
    let history = out.join("history.jsonl");
    save_history(&outcome.history, &history)?;
    let final_checkpoint = out.join("final.ckpt");
    Checkpoint { params: outcome.params, state: None }.save(&final_checkpoint)?;
    let mut resolved = fs::File::create(out.join("config.resolved.toml"))?;
    resolved.write_all(toml::to_string(cfg)?.as_bytes())?;

    let manifest = RunManifest {
        command,
        config: cfg.clone(),
        seed: cfg.train.seed,
        artifacts: Artifacts { metrics, history, final_checkpoint, checkpoints: outcome.checkpoints },
        started_at,
        finished_at: now(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.write_atomic(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
