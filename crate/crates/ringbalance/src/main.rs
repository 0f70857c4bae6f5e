use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ringbalance::allocator::{increments_closed_form, increments_linear_system, RateVector};
use ringbalance::domain::{validate, ExperimentConfig, ModelKind, Nanos, RunMode, WorkerProfile};
use ringbalance::engine::run_experiment;
use ringbalance::metrics::{mean_epoch_total_ns, write_csv, write_json};
use ringbalance::trainer::gradient_check;

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "ringbalance", version, about = "Heterogeneity-aware task allocation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config and write CSV + JSON reports.
    Run(RunArgs),
    /// Run the config once per cost vector and emit a comparison summary.
    Sweep(SweepArgs),
    /// Cross-check the closed-form increments against the linear-system solve.
    VerifyAllocator(VerifyArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the allocation mode: equal, static or adaptive.
    #[arg(long)]
    mode: Option<String>,
    /// Static weights, comma separated (with --mode static).
    #[arg(long)]
    weights: Option<String>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<u64>,
    /// Override the RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run.csv and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-worker per-sample costs, e.g. "1ms,2ms". Repeat per cluster.
    #[arg(long = "costs", required = true)]
    costs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Worker-count range, e.g. "2..8" (inclusive).
    #[arg(long, default_value = "2..8")]
    n: String,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model kind: linear_regression, softmax or mlp.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RINGBALANCE_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::VerifyAllocator(args) => cmd_verify(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
}

fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) -> Result<(), String> {
    if let Some(mode) = &args.mode {
        config.mode = match mode.as_str() {
            "equal" => RunMode::Equal,
            "adaptive" => RunMode::Adaptive,
            "static" => {
                let weights = match (&args.weights, &config.mode) {
                    (Some(spec), _) => parse_u64_list(spec)?,
                    (None, RunMode::Static { weights }) => weights.clone(),
                    (None, _) => {
                        return Err("--mode static needs --weights or static weights in the config"
                            .to_string())
                    }
                };
                RunMode::Static { weights }
            }
            other => return Err(format!("unknown mode {other:?}")),
        };
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<u8, String> {
    let mut config = load_config(&args.config)?;
    apply_overrides(&mut config, &args)?;
    let violations = validate(&config);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid config: {v}");
        }
        return Ok(EXIT_VALIDATION);
    }
    let report = run_experiment(&config).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&args.out).map_err(|e| format!("cannot create out dir: {e}"))?;
    let csv_path = args.out.join("run.csv");
    let json_path = args.out.join("run.json");
    write_csv(&report, &csv_path).map_err(|e| e.to_string())?;
    write_json(&report, &json_path).map_err(|e| e.to_string())?;
    println!(
        "wrote {} and {} (final allocation {:?}, final loss {})",
        csv_path.display(),
        json_path.display(),
        report.frozen_allocation,
        report.final_loss
    );
    Ok(EXIT_OK)
}

fn cmd_sweep(args: SweepArgs) -> Result<u8, String> {
    let base = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| format!("cannot create out dir: {e}"))?;
    let mut summary = String::from("run,costs_ns,mode,mean_epoch_ns,equal_mean_epoch_ns,speedup_vs_equal\n");
    for (idx, spec) in args.costs.iter().enumerate() {
        let costs = parse_cost_list(spec)?;
        let mut config = base.clone();
        config.workers = costs
            .iter()
            .enumerate()
            .map(|(rank, &per_sample_cost_ns)| WorkerProfile {
                rank,
                per_sample_cost_ns,
                jitter_sigma: 0.0,
            })
            .collect();
        if let RunMode::Static { weights } = &config.mode {
            if weights.len() != config.workers.len() {
                config.mode = RunMode::Adaptive;
            }
        }
        let violations = validate(&config);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("invalid config for costs {spec}: {v}");
            }
            return Ok(EXIT_VALIDATION);
        }
        let report = run_experiment(&config).map_err(|e| e.to_string())?;
        let mut equal_config = config.clone();
        equal_config.mode = RunMode::Equal;
        let equal_report = run_experiment(&equal_config).map_err(|e| e.to_string())?;

        write_csv(&report, &args.out.join(format!("run_{idx}.csv"))).map_err(|e| e.to_string())?;
        write_json(&report, &args.out.join(format!("run_{idx}.json")))
            .map_err(|e| e.to_string())?;
        let mode_mean = mean_epoch_total_ns(&report);
        let equal_mean = mean_epoch_total_ns(&equal_report);
        let mode_label = match &config.mode {
            RunMode::Equal => "equal",
            RunMode::Static { .. } => "static",
            RunMode::Adaptive => "adaptive",
        };
        summary.push_str(&format!(
            "{idx},{},{mode_label},{mode_mean},{equal_mean},{}\n",
            spec.replace(',', ";"),
            equal_mean / mode_mean
        ));
    }
    let summary_path = args.out.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| e.to_string())?;
    println!("wrote {}", summary_path.display());
    Ok(EXIT_OK)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, String> {
    let (lo, hi) = parse_range(&args.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;
    for n in lo..=hi {
        for _ in 0..args.trials {
            let weights: Vec<u64> = (0..n).map(|_| rng.gen_range(1..100u64)).collect();
            let v = RateVector((0..n).map(|_| rng.gen_range(0.01..100.0f64)).collect());
            let a = increments_closed_form(&weights, &v);
            let b = increments_linear_system(&weights, &v).map_err(|e| e.to_string())?;
            let scale = weights.iter().sum::<u64>() as f64;
            for (x, y) in a.0.iter().zip(&b.0) {
                worst = worst.max((x - y).abs() / scale);
            }
        }
    }
    println!("max relative residual over n in {lo}..={hi}, {} trials each: {worst:e}", args.trials);
    if worst < 1e-9 {
        println!("OK");
        Ok(EXIT_OK)
    } else {
        println!("FAIL (tolerance 1e-9)");
        Ok(EXIT_VALIDATION)
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, String> {
    let kind = match args.model.as_str() {
        "linear" | "linear_regression" => ModelKind::LinearRegression,
        "softmax" => ModelKind::Softmax,
        "mlp" => ModelKind::Mlp,
        other => return Err(format!("unknown model {other:?}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let worst = gradient_check(kind, args.trials, &mut rng).map_err(|e| e.to_string())?;
    println!("max relative error over {} trials: {worst:e}", args.trials);
    if worst < 1e-4 {
        println!("OK");
        Ok(EXIT_OK)
    } else {
        println!("FAIL (tolerance 1e-4)");
        Ok(EXIT_VALIDATION)
    }
}

fn parse_u64_list(spec: &str) -> Result<Vec<u64>, String> {
    spec.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("bad weight {s:?}: {e}")))
        .collect()
}

fn parse_cost_list(spec: &str) -> Result<Vec<Nanos>, String> {
    spec.split(',').map(|s| parse_duration_ns(s.trim())).collect()
}

/// Parse durations like "1ms", "2s", "500us" or "100ns" into nanoseconds.
fn parse_duration_ns(s: &str) -> Result<Nanos, String> {
    let (digits, multiplier) = if let Some(d) = s.strip_suffix("ns") {
        (d, 1u64)
    } else if let Some(d) = s.strip_suffix("us") {
        (d, 1_000)
    } else if let Some(d) = s.strip_suffix("ms") {
        (d, 1_000_000)
    } else if let Some(d) = s.strip_suffix('s') {
        (d, 1_000_000_000)
    } else {
        (s, 1)
    };
    let value: f64 = digits
        .trim()
        .parse()
        .map_err(|e| format!("bad duration {s:?}: {e}"))?;
    if value <= 0.0 {
        return Err(format!("duration {s:?} must be positive"));
    }
    Ok((value * multiplier as f64).round() as Nanos)
}

fn parse_range(spec: &str) -> Result<(usize, usize), String> {
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo = lo.trim().parse().map_err(|e| format!("bad range {spec:?}: {e}"))?;
        let hi = hi.trim().parse().map_err(|e| format!("bad range {spec:?}: {e}"))?;
        if lo < 2 || hi < lo {
            return Err(format!("range {spec:?} must satisfy 2 <= lo <= hi"));
        }
        Ok((lo, hi))
    } else {
        let n = spec.trim().parse().map_err(|e| format!("bad range {spec:?}: {e}"))?;
        Ok((n, n))
    }
}
