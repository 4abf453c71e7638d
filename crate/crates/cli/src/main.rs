use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvcomp_core::harness::to_jsonl;
use kvcomp_core::trace::{SyntheticConfig, DEFAULT_SINK_BIAS};
use kvcomp_core::{
    compare_policies, density_report, run_replay_path, write_trace, CachePolicyConfig, Error,
    Policy, ThresholdScope,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRACE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "kvcomp",
    version,
    about = "KV-cache compression trace replay harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic attention trace.
    Generate(GenerateArgs),
    /// Replay a trace under one policy and emit a JSON report.
    Replay(ReplayArgs),
    /// Replay a trace under several policies and emit a CSV table.
    Compare(CompareArgs),
    /// Per-layer attention density as CSV.
    DensityReport(DensityArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 192)]
    prompt_len: usize,
    #[arg(long, default_value_t = 64)]
    gen_len: usize,
    /// First-token logit boost at the deepest layer.
    #[arg(long, default_value_t = DEFAULT_SINK_BIAS)]
    sink_bias: f64,
    #[arg(long, default_value_t = 1.0)]
    sharpening: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PolicyArgs {
    /// Budget fraction r of the prompt length.
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    /// Important:recent split, e.g. 3:1.
    #[arg(long, default_value = "3:1", value_parser = parse_nm)]
    nm: (u32, u32),
    /// Attention-sink tokens T.
    #[arg(long, default_value_t = 4)]
    sinks: usize,
    /// Density gate g.
    #[arg(long, default_value_t = 100.0)]
    gate: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.7)]
    beta: f64,
    /// Disable merging of evicted tokens (d2o only).
    #[arg(long)]
    no_merge: bool,
    #[arg(long, default_value = "head")]
    threshold_scope: ThresholdScope,
    #[arg(long)]
    seed: Option<u64>,
}

impl PolicyArgs {
    fn config(&self, policy: Policy) -> CachePolicyConfig {
        CachePolicyConfig {
            policy,
            ratio: self.ratio,
            important_ratio: self.nm.0,
            recent_ratio: self.nm.1,
            sinks: self.sinks,
            gate: self.gate,
            alpha: self.alpha,
            beta: self.beta,
            merge_enabled: !self.no_merge,
            threshold_scope: self.threshold_scope,
            seed: self.seed,
        }
    }
}

fn parse_nm(s: &str) -> Result<(u32, u32), String> {
    let (n, m) = s
        .split_once(':')
        .ok_or_else(|| format!("expected N:M, got {s:?}"))?;
    let n = n
        .trim()
        .parse()
        .map_err(|e| format!("bad N in {s:?}: {e}"))?;
    let m = m
        .trim()
        .parse()
        .map_err(|e| format!("bad M in {s:?}: {e}"))?;
    Ok((n, m))
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, short)]
    trace: PathBuf,
    #[arg(long, default_value = "d2o")]
    policy: Policy,
    #[command(flatten)]
    policy_args: PolicyArgs,
    /// JSON report destination (stdout when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Write per-eviction merge/discard events as JSON lines.
    #[arg(long)]
    log_merges: Option<PathBuf>,
    /// Write eviction decisions as JSON lines.
    #[arg(long)]
    log_decisions: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, short)]
    trace: PathBuf,
    /// Comma-separated policies, one table row each.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,local_window,streaming,h2o,roco,d2o"
    )]
    policies: Vec<Policy>,
    #[command(flatten)]
    policy_args: PolicyArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long, short)]
    trace: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    gate: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => {
            let trace = SyntheticConfig {
                seed: a.seed,
                layers: a.layers,
                heads: a.heads,
                head_dim: a.head_dim,
                prompt_len: a.prompt_len,
                gen_len: a.gen_len,
                sink_bias: a.sink_bias,
                sharpening: a.sharpening,
            }
            .generate()
            .map_err(|e| match e {
                Error::Contract(msg) => Error::Config(msg),
                other => other,
            })?;
            write_trace(&trace, &a.out)?;
            eprintln!(
                "wrote {} ({} layers x {} heads, {} prompt + {} generated tokens)",
                a.out.display(),
                trace.num_layers,
                trace.num_heads,
                trace.prompt_len,
                trace.gen_len()
            );
        }
        Command::Replay(a) => {
            let config = a.policy_args.config(a.policy);
            let output = run_replay_path(&a.trace, &config)?;
            let mut json = serde_json::to_string_pretty(&output.report)
                .map_err(|e| Error::Serialize(e.to_string()))?;
            json.push('\n');
            emit(a.out.as_deref(), &json)?;
            if let Some(path) = &a.log_merges {
                fs::write(path, to_jsonl(&output.merges)?)?;
            }
            if let Some(path) = &a.log_decisions {
                fs::write(path, to_jsonl(&output.decisions)?)?;
            }
            let s = &output.report.summary;
            eprintln!(
                "{}: entries {} / {} ({:.1}% saved), mean drift {:.6}, prompt {:?}, generation {:?}",
                config.policy,
                s.final_total_entries,
                s.full_cache_entries,
                100.0 * s.memory_reduction,
                s.mean_drift,
                output.report.timing.prompt,
                output.report.timing.generation
            );
        }
        Command::Compare(a) => {
            let configs: Vec<CachePolicyConfig> = a
                .policies
                .iter()
                .map(|&p| a.policy_args.config(p))
                .collect();
            let csv = compare_policies(&a.trace, &configs)?;
            emit(a.out.as_deref(), &csv)?;
        }
        Command::DensityReport(a) => {
            let report = density_report(&a.trace, a.gate)?;
            emit(a.out.as_deref(), &report.to_csv()?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvcomp: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
                Error::Parse(_) => EXIT_TRACE,
                _ => EXIT_FAILURE,
            })
        }
    }
}
