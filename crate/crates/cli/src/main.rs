use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kvtier::analyze::analyze;
use kvtier::bench::{bench_points, run_bench, WallTimer};
use kvtier::config::Policy;
use kvtier::engine;
use kvtier::par::Exec;
use kvtier::sweep::{self, Axis};
use kvtier::{Error, RunConfig};

const WALLCLOCK_SCHEMA: &str = "kvtier.wallclock.v1";

#[derive(Parser, Debug)]
#[command(
    name = "kvtier",
    version,
    about = "Tiered KV-cache inference simulator"
)]
struct Cli {
    /// JSON run configuration; the built-in minimal config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Workload seed, overriding `workload.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep, analyze and planning; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prefill and decode, writing metrics.json, steps.csv and ledger.csv.
    Run,
    /// Solve the schedule and print it with its predicted breakdown.
    Plan,
    /// Run one configuration per axis value and policy into sweep.csv.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "dynamic")]
        policies: Vec<String>,
    },
    /// Paired dense and sparse runs: sparsity and correlation reports.
    Analyze {
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.8")]
        ratios: Vec<f64>,
    },
    /// Time real decode steps and fit mac_rate.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        prompt_lens: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Print the minimal configuration as JSON.
    ExampleConfig,
}

fn exit_code(e: &anyhow::Error) -> (u8, &'static str) {
    match e.downcast_ref::<Error>() {
        Some(err @ Error::Config(_)) => (2, err.class()),
        Some(err @ Error::Infeasible(_)) => (3, err.class()),
        Some(err @ Error::OutOfDeviceMemory { .. }) => (4, err.class()),
        Some(err) => (1, err.class()),
        None => (1, "Error"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = exit_code(&e);
            eprintln!("error [{class}]: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::minimal(),
    };
    if let Some(seed) = cli.seed {
        cfg.workload.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn executor(jobs: Option<usize>) -> anyhow::Result<Exec> {
    match jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into()).into()),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the worker pool")?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::default()),
    }
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_wallclock(dir: &Path, command: &str, started: Instant) -> anyhow::Result<()> {
    let doc = serde_json::json!({
        "schema": WALLCLOCK_SCHEMA,
        "command": command,
        "elapsed_s": started.elapsed().as_secs_f64(),
    });
    write_text(dir, "wallclock.json", &serde_json::to_string_pretty(&doc)?)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> anyhow::Result<Vec<T>> {
    Ok(items
        .iter()
        .map(|s| s.trim().parse())
        .collect::<Result<_, Error>>()?)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Command::ExampleConfig = cli.command {
        println!("{}", RunConfig::minimal().to_json()?);
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let exec = executor(cli.jobs)?;
    let started = Instant::now();
    let dir = cfg.output.dir.clone();

    match &cli.command {
        Command::Plan => {
            let plan = cfg.resolve_plan()?;
            println!("{}", serde_json::to_string_pretty(&plan)?);
            return Ok(());
        }
        Command::ExampleConfig => unreachable!(),
        _ => {}
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    match cli.command {
        Command::Run => {
            let (metrics, ledger) = engine::run_with_ledger(&cfg)?;
            write_text(&dir, "metrics.json", &metrics.to_json()?)?;
            metrics.write_steps_csv(create(&dir, "steps.csv")?)?;
            ledger.write_csv(create(&dir, "ledger.csv")?)?;
            write_wallclock(&dir, "run", started)?;
            println!(
                "generated {} tokens in {:.6e} simulated s ({:.6e} tokens/s), plan {} alpha={} beta={} p1={} p2={}",
                metrics.tokens_generated,
                metrics.total_s,
                metrics.throughput_tokens_per_s,
                metrics.policy,
                metrics.plan.alpha,
                metrics.plan.beta,
                metrics.plan.p1,
                metrics.plan.p2,
            );
        }
        Command::Sweep {
            axis,
            values,
            policies,
        } => {
            let axis: Axis = axis.parse()?;
            let policies: Vec<Policy> = parse_list(&policies)?;
            let values = values.unwrap_or_else(|| axis.default_values(&cfg));
            let rows = sweep::sweep(&cfg, axis, &values, &policies, exec);
            sweep::write_sweep_csv(&rows, create(&dir, "sweep.csv")?)?;
            write_wallclock(&dir, "sweep", started)?;
            for r in &rows {
                match &r.error_class {
                    None => println!(
                        "{}={} {}: {:.6e} tokens/s, {} bytes moved",
                        axis.name(),
                        r.value,
                        r.policy.name(),
                        r.throughput_tokens_per_s,
                        r.transferred_bytes
                    ),
                    Some(class) => println!(
                        "{}={} {}: failed [{class}]",
                        axis.name(),
                        r.value,
                        r.policy.name()
                    ),
                }
            }
        }
        Command::Analyze { ratios } => {
            let report = analyze(&cfg, &ratios, exec)?;
            write_text(&dir, "analysis.json", &report.to_json()?)?;
            report.write_sparsity_csv(create(&dir, "sparsity.csv")?)?;
            report.write_correlation_csv(create(&dir, "correlation.csv")?)?;
            write_wallclock(&dir, "analyze", started)?;
            for v in &report.variants {
                let rho = v
                    .score_correlation
                    .map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
                println!("{} r={}: rho={rho}", v.variant.name(), v.ratio);
            }
        }
        Command::Bench { prompt_lens, steps } => {
            let points = bench_points(&cfg, &prompt_lens, steps);
            let fit = run_bench(
                &cfg,
                &points,
                &mut WallTimer {
                    config: cfg.clone(),
                },
            )?;
            let doc = serde_json::json!({
                "schema": WALLCLOCK_SCHEMA,
                "command": "bench",
                "elapsed_s": started.elapsed().as_secs_f64(),
                "fit": fit,
            });
            let text = serde_json::to_string_pretty(&doc)?;
            write_text(&dir, "wallclock.json", &text)?;
            if let Some(w) = &fit.warning {
                eprintln!("warning: {w}");
            }
            println!("{text}");
        }
        Command::Plan | Command::ExampleConfig => unreachable!(),
    }
    Ok(())
}
