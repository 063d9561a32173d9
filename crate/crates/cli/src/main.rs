//! `moe-sim`: trace generation, simulation, comparison, sweeps and the
//! brute-force check.

mod output;
#[cfg(test)]
mod tests;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use moe_sim_core::sim::{self, config::DEFAULT_EPLB_PERIOD_ITERS, Ablation, SimConfig};
use moe_sim_core::workload::{
    batch_requests, format_trace, gen_synthetic_trace, parse_trace, TraceParams,
};
use moe_sim_core::{oracle_check, MetricsReport, OracleCheckParams, PolicyKind, SweepParam};

use output::{out_dir, sha256_hex, RunDir};

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
/// Test builds use `println!` itself so the harness captures the output.
#[cfg(not(test))]
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[cfg(test)]
macro_rules! say {
    ($($arg:tt)*) => {
        println!($($arg)*)
    };
}

#[derive(Parser)]
#[command(name = "moe-sim", version, about = "Serverless MoE serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic request trace.
    GenTrace(GenTraceArgs),
    /// Simulate one policy over a trace.
    Simulate(SimulateArgs),
    /// Paired runs of several policies over the same trace.
    Compare(CompareArgs),
    /// One run per value of a parameter grid.
    Sweep(SweepArgs),
    /// Compare scaler + placer against the exhaustive optimum on small instances.
    OracleCheck(OracleCheckArgs),
    /// Print a summary of a previous run's output.
    Report(ReportArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be > 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be >= 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct GenTraceArgs {
    /// Number of requests.
    #[arg(long, value_parser = positive_usize)]
    count: usize,
    /// Mean arrival rate, requests per second.
    #[arg(long, value_parser = positive_f64)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256.0, value_parser = positive_f64)]
    prompt_median: f64,
    #[arg(long, default_value_t = 32.0, value_parser = positive_f64)]
    output_median: f64,
    #[arg(long, default_value_t = 256)]
    max_output: u64,
    /// Trace file to write.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (flat TOML); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: PathBuf,
    /// Output directory [env: MOE_SIM_OUT_DIR]
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Override the config's policy: serverless, static, eplb, oracle.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated policy names.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "serverless,eplb,static,oracle"
    )]
    policies: Vec<String>,
    /// Also run serverless with predictor, scaler and placer disabled.
    #[arg(long)]
    ablation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParamArg {
    Cv,
    Distance,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    param: SweepParamArg,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    step: f64,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 200, value_parser = positive_usize)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    max_experts: usize,
    #[arg(long, default_value_t = 3)]
    max_gpus: usize,
    #[arg(long, default_value_t = 4)]
    max_extra: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = 1.5)]
    tolerance: f64,
    /// Equal loads on every expert instead of Zipf.
    #[arg(long)]
    uniform: bool,
    /// Output directory [env: MOE_SIM_OUT_DIR]
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory or one of its JSON files.
    path: PathBuf,
}

/// Exit code of one invocation and its one-line diagnostic, if any.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: Option<String>,
}

/// Parses `args` (program name first) and runs the command.
fn execute<I, T>(args: I) -> Exit
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Exit {
                code: 0,
                message: None,
            };
        }
        Err(e) => {
            let text = e.to_string();
            let line = text
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim()
                .to_string();
            return Exit {
                code: 2,
                message: Some(line),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => Exit {
            code: 0,
            message: None,
        },
        Err(e) => Exit {
            code: 1,
            message: Some(format!("error: {}", format!("{e:#}").replace('\n', " "))),
        },
    }
}

fn main() -> ExitCode {
    let exit = execute(std::env::args_os());
    if let Some(m) = &exit.message {
        eprintln!("{m}");
    }
    ExitCode::from(exit.code)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => sweep(a),
        Command::OracleCheck(a) => run_oracle_check(a),
        Command::Report(a) => report(a),
    }
}

// ─── Shared plumbing ──────────────────────────────────────────────────────────

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    let config = match path {
        Some(p) => sim::load_config(p).with_context(|| format!("config {}", p.display()))?,
        None => SimConfig::default(),
    };
    Ok(config)
}

struct Trace {
    requests: Vec<moe_sim_core::Request>,
    digest: String,
}

fn load_trace(path: &Path) -> Result<Trace> {
    let bytes = fs::read(path).with_context(|| format!("cannot read trace {}", path.display()))?;
    let requests = parse_trace(path).with_context(|| format!("trace {}", path.display()))?;
    if requests.is_empty() {
        bail!("trace {} has no requests", path.display());
    }
    Ok(Trace {
        requests,
        digest: sha256_hex(&bytes),
    })
}

fn config_digest(configs: &[&SimConfig]) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(configs)?))
}

fn policy_by_name(name: &str, base: &SimConfig) -> Result<PolicyKind> {
    let (period, budget) = match base.policy {
        PolicyKind::Eplb {
            period_iters,
            replica_budget,
        } => (period_iters, replica_budget),
        _ => (DEFAULT_EPLB_PERIOD_ITERS, base.cluster.gpu_count),
    };
    Ok(sim::parse_policy(name, period, budget)?)
}

fn summary_line(r: &MetricsReport) -> String {
    format!(
        "{:<36} mean {:>10.4} ms  p50 {:>10.4}  p95 {:>10.4}  p99 {:>10.4}  replicas/layer {:>6.2}  cost(serverless) {:.4e}  cost(serverful) {:.4e}",
        r.policy,
        r.mean_forward_ms,
        r.p50_forward_ms,
        r.p95_forward_ms,
        r.p99_forward_ms,
        r.mean_replicas_per_layer,
        r.cost_serverless_mb_ms,
        r.cost_serverful_mb_ms
    )
}

fn write_run(dir: &mut RunDir, prefix: &str, r: &MetricsReport) -> Result<()> {
    dir.write_json(&format!("{prefix}summary.json"), r)?;
    dir.write(&format!("{prefix}samples.csv"), r.samples_csv())
}

// ─── Commands ─────────────────────────────────────────────────────────────────

fn gen_trace(a: GenTraceArgs) -> Result<()> {
    let params = TraceParams {
        count: a.count,
        rate: a.rate,
        prompt_median: a.prompt_median,
        output_median: a.output_median,
        max_output: a.max_output,
        seed: a.seed,
        ..TraceParams::default()
    };
    let requests = gen_synthetic_trace(&params)?;
    fs::write(&a.output, format_trace(&requests))
        .with_context(|| format!("cannot write {}", a.output.display()))?;
    let n = requests.len() as f64;
    let span_s = requests.last().map_or(0, |r| r.arrival_ms) as f64 / 1000.0;
    say!(
        "wrote {} requests to {}: span {:.1} s, mean prompt {:.1} tokens, mean output {:.1} tokens, {} iterations",
        requests.len(),
        a.output.display(),
        span_s,
        requests.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / n,
        requests.iter().map(|r| r.output_tokens as f64).sum::<f64>() / n,
        batch_requests(&requests).len()
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut config = load_config(a.run.config.as_deref())?;
    if let Some(name) = &a.policy {
        config.policy = policy_by_name(name, &config)?;
        config.validate()?;
    }
    let trace = load_trace(&a.run.trace)?;
    let report = sim::run(&config, &trace.requests)?;
    let mut dir = RunDir::create(out_dir(a.run.output))?;
    write_run(&mut dir, "", &report)?;
    let root = dir.finish(
        "simulate",
        config.seed,
        config_digest(&[&config])?,
        Some(trace.digest),
    )?;
    say!("{}", summary_line(&report));
    say!("outputs in {}", root.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let base = load_config(a.run.config.as_deref())?;
    let mut configs = Vec::new();
    for name in &a.policies {
        configs.push(
            base.clone()
                .with_policy(policy_by_name(name.trim(), &base)?),
        );
    }
    if a.ablation {
        let mut c = base.clone().with_policy(PolicyKind::Serverless);
        c.ablation = Ablation::all();
        configs.push(c);
    }
    let labels: Vec<String> = configs.iter().map(SimConfig::label).collect();
    if let Some(dup) = labels
        .iter()
        .enumerate()
        .find(|(i, l)| labels[..*i].contains(l))
    {
        bail!("policy {} listed twice", dup.1);
    }
    let trace = load_trace(&a.run.trace)?;
    let cmp = sim::run_comparison(&configs, &trace.requests)?;

    let mut dir = RunDir::create(out_dir(a.run.output))?;
    for r in &cmp.reports {
        write_run(&mut dir, &format!("{}.", r.policy), r)?;
    }
    dir.write_json("comparison.json", &cmp)?;
    let mut cdf = String::from("policy,quantile,forward_ms\n");
    for c in &cmp.cdfs {
        for (q, v) in c.quantiles.iter().enumerate() {
            cdf.push_str(&format!("{},{},{}\n", c.policy, q as f64 / 100.0, v));
        }
    }
    dir.write("cdf.csv", cdf)?;
    let refs: Vec<&SimConfig> = configs.iter().collect();
    let root = dir.finish(
        "compare",
        base.seed,
        config_digest(&refs)?,
        Some(trace.digest),
    )?;
    for r in &cmp.reports {
        say!("{}", summary_line(r));
    }
    say!("outputs in {}", root.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let config = load_config(a.run.config.as_deref())?;
    let param = match a.param {
        SweepParamArg::Cv => SweepParam::CvThreshold,
        SweepParamArg::Distance => SweepParam::Distance,
    };
    let values = sim::grid(a.from, a.to, a.step)?;
    let trace = load_trace(&a.run.trace)?;
    let report = sim::sweep(&config, param, &values, &trace.requests)?;
    let mut dir = RunDir::create(out_dir(a.run.output))?;
    let csv = report.to_csv();
    dir.write("sweep.csv", &csv)?;
    dir.write_json("sweep.json", &report)?;
    let root = dir.finish(
        "sweep",
        config.seed,
        config_digest(&[&config])?,
        Some(trace.digest),
    )?;
    say!("{}", csv.trim_end());
    say!("outputs in {}", root.display());
    Ok(())
}

fn run_oracle_check(a: OracleCheckArgs) -> Result<()> {
    let params = OracleCheckParams {
        instances: a.instances,
        seed: a.seed,
        max_experts: a.max_experts,
        max_gpus: a.max_gpus,
        max_extra: a.max_extra,
        zipf_exponent: a.zipf_exponent,
        tolerance: a.tolerance,
        uniform: a.uniform,
        ..OracleCheckParams::default()
    };
    let report = oracle_check(&params)?;
    let mut dir = RunDir::create(out_dir(a.output))?;
    dir.write_json("oracle_check.json", &report)?;
    let root = dir.finish(
        "oracle-check",
        a.seed,
        sha256_hex(&serde_json::to_vec(&params)?),
        None,
    )?;
    say!(
        "{} instances: dominance violations {}, ratio min {:.4} mean {:.4} p50 {:.4} p95 {:.4} max {:.4}, within {} : {:.1}%",
        params.instances,
        report.dominance_violations,
        report.ratio_min,
        report.ratio_mean,
        report.ratio_p50,
        report.ratio_p95,
        report.ratio_max,
        params.tolerance,
        100.0 * report.within_tolerance_fraction
    );
    say!("outputs in {}", root.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let files: Vec<PathBuf> = if a.path.is_dir() {
        let mut v: Vec<PathBuf> = [
            "summary.json",
            "comparison.json",
            "sweep.json",
            "oracle_check.json",
        ]
        .iter()
        .map(|f| a.path.join(f))
        .filter(|p| p.exists())
        .collect();
        v.sort();
        v
    } else {
        vec![a.path.clone()]
    };
    if files.is_empty() {
        bail!("{} holds no run output", a.path.display());
    }
    for f in files {
        let text =
            fs::read_to_string(&f).with_context(|| format!("cannot read {}", f.display()))?;
        let v: Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not JSON", f.display()))?;
        if v.get("reports").is_some() {
            let cmp: sim::ComparisonReport = serde_json::from_value(v)?;
            for r in &cmp.reports {
                say!("{}", summary_line(r));
            }
            for m in &cmp.mean_ratios {
                say!(
                    "mean ratio {} / {} = {:.4}",
                    m.numerator,
                    m.denominator,
                    m.ratio
                );
            }
        } else if v.get("points").is_some() {
            let s: sim::SweepReport = serde_json::from_value(v)?;
            say!("{}", s.to_csv().trim_end());
        } else if v.get("dominance_violations").is_some() {
            let o: moe_sim_core::OracleCheckReport = serde_json::from_value(v)?;
            say!(
                "dominance violations {}, ratio p50 {:.4} p95 {:.4} max {:.4}, within tolerance {:.1}%",
                o.dominance_violations,
                o.ratio_p50,
                o.ratio_p95,
                o.ratio_max,
                100.0 * o.within_tolerance_fraction
            );
        } else {
            let r: MetricsReport = serde_json::from_value(v)
                .with_context(|| format!("{} is not a run summary", f.display()))?;
            say!("{}", summary_line(&r));
        }
    }
    Ok(())
}
