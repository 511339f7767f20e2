use std::io::{self, Write};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use dilattn_bench::record::{write_csv, write_json, Kernel};
use dilattn_bench::runner::{config_for, run_benchmark, runtime_exponent, BenchSpec};
use dilattn_bench::verify::{run_verification_suite, VerifyOptions};
use dilattn_core::complexity::{count_flops, max_path_length};
use dilattn_core::distributed::communication_sweep;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Analysis {
    /// Counted MACs against the closed-form cost and bound.
    Flops,
    /// Dependency-graph diameter.
    Paths,
    /// Per-device gather volume across the requested lengths.
    Comm,
}

/// Times dense and dilated attention, runs the analyzers, or runs the
/// invariant suites.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, value_enum, default_value_t = Kernel::Dilated)]
    kernel: Kernel,
    /// `longnet-32k`, `geo:<w0>,<alpha>` or `file:<path>`.
    #[arg(long, default_value = "geo:256,2")]
    preset: String,
    /// Sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096])]
    n: Vec<usize>,
    /// Model width, split evenly across heads.
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long)]
    causal: bool,
    #[arg(long, default_value_t = 1)]
    world_size: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    out: OutputFormat,
    /// Zero-pad lengths the schedule does not divide.
    #[arg(long)]
    pad: bool,
    /// Run the invariant suites instead of benchmarking.
    #[arg(long)]
    verify: bool,
    /// Restrict `--verify` to these suites.
    #[arg(long, value_delimiter = ',', requires = "verify")]
    only: Vec<String>,
    /// Override every floating-point tolerance of `--verify`.
    #[arg(long, requires = "verify")]
    tolerance: Option<f64>,
    /// Print an analyzer report (JSON) for each length instead of timing.
    #[arg(long, value_enum, conflicts_with = "verify")]
    analyze: Option<Analysis>,
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every check passed.
fn run(args: Args) -> Result<bool> {
    if args.verify {
        let opts = VerifyOptions {
            only: args.only.clone(),
            tolerance: args.tolerance,
            seed: args.seed,
        };
        let report = run_verification_suite(&opts)?;
        print!("{}", report.table());
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        println!("{} checks, {} failed", report.checks.len(), failed);
        return Ok(failed == 0);
    }

    let spec = BenchSpec {
        kernel: args.kernel,
        n_values: args.n.clone(),
        d: args.d,
        heads: args.heads,
        causal: args.causal,
        preset: args.preset.clone(),
        world_size: args.world_size,
        repeats: args.repeats,
        warmups: args.warmups,
        seed: args.seed,
        pad: args.pad,
    };
    if let Some(analysis) = args.analyze {
        return analyze(&spec, analysis);
    }

    let rows = run_benchmark(&spec)?;
    let mut records = Vec::new();
    for row in rows {
        match row {
            Ok(r) => records.push(r),
            Err(skip) => eprintln!("skipped {} n={}: {}", skip.kernel, skip.n, skip.reason),
        }
    }
    let stdout = io::stdout().lock();
    match args.out {
        OutputFormat::Csv => write_csv(&records, stdout)?,
        OutputFormat::Json => write_json(&records, stdout)?,
    }
    if let Some(p) = runtime_exponent(&records) {
        // guide values: near-linear kernels stay below 1.3, quadratic ones above 1.7
        eprintln!("fitted runtime exponent ({}): {p:.3}", spec.kernel);
    }
    Ok(true)
}

fn analyze(spec: &BenchSpec, analysis: Analysis) -> Result<bool> {
    let mut out = io::stdout().lock();
    match analysis {
        Analysis::Flops | Analysis::Paths => {
            for &n in &spec.n_values {
                let config = config_for(spec, n).with_context(|| format!("n={n}"))?;
                let json = match analysis {
                    Analysis::Flops => count_flops(n, spec.d, &config)?.to_json(),
                    _ => serde_json::json!({ "n": n, "max_path_length": max_path_length(n, &config)? }).to_string(),
                };
                writeln!(out, "{json}")?;
            }
        }
        Analysis::Comm => {
            let (w0, alpha) = parse_geometric(&spec.preset)?;
            let report = communication_sweep(
                w0,
                alpha,
                spec.d,
                spec.heads,
                spec.world_size,
                &spec.n_values,
                spec.seed,
            )?;
            writeln!(out, "{}", report.to_json())?;
            return Ok(report.is_constant());
        }
    }
    Ok(true)
}

fn parse_geometric(preset: &str) -> Result<(usize, usize)> {
    let rest = preset
        .strip_prefix("geo:")
        .context("--analyze comm needs a geo:<w0>,<alpha> preset")?;
    let (a, b) = rest.split_once(',').context("expected geo:<w0>,<alpha>")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}
