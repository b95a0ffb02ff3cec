//! `poe-debias`: generate biased datasets, run the two-stage pipeline, sweep
//! a knob over seeds, and recompute analyses from a run directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use poe_debias::analysis::read_dynamics_csv;
use poe_debias::biasgen::{self, bundle_stats, Split};
use poe_debias::experiment::{
    analyze_parts, analyze_run, generate_for, run_seeds, run_sweep, write_analysis, write_run_dir,
    ExperimentConfig, Variant,
};
use poe_debias::io::write_atomic;
use poe_debias::models::Model;
use poe_debias::Error;

const SEED_ENV: &str = "POE_DEBIAS_SEED";

#[derive(Parser)]
#[command(name = "poe-debias", version, about = "Product-of-experts debiasing with a weak learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file and print its statistics.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train weak, CE, PoE and PoE+CE models for each seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep the configured axis over its values and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Recompute regimes, bias report and data map from a run directory.
    Analyze {
        /// Directory written by `run` for one seed.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig { .. } => 2,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>, seeds: Option<usize>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.base_seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("{SEED_ENV}: expected an unsigned integer, got `{v}`")))?;
    }
    if let Some(n) = seeds {
        if n == 0 {
            return Err(Failure::config("--seeds must be at least 1"));
        }
        cfg.seeds = n;
    }
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Timestamps and host details live here so the artifacts stay reproducible.
struct RunLog {
    path: PathBuf,
    lines: Vec<String>,
    start: Instant,
}

impl RunLog {
    fn new(dir: &Path, command: &str) -> Self {
        let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "unknown".into());
        Self {
            path: dir.join("run.log"),
            lines: vec![format!("started_unix={} command={command} host={host}", unix_now())],
            start: Instant::now(),
        }
    }

    fn note(&mut self, what: &str) {
        self.lines.push(format!("{:>9.2}s {what}", self.start.elapsed().as_secs_f64()));
    }

    fn finish(mut self) -> CliResult<()> {
        self.note(&format!("finished_unix={}", unix_now()));
        let mut text = self.lines.join("\n");
        text.push('\n');
        write_atomic(&self.path, text.as_bytes())?;
        Ok(())
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = load_config(config, None)?;
    let bundle = generate_for(&cfg, 0)?;
    biasgen::save_to_path(&bundle, out)?;
    let stats = serde_json::json!({
        "file": out.display().to_string(),
        "genspec": bundle.spec.header(),
        "splits": bundle_stats(&bundle)?,
    });
    println!("{}", serde_json::to_string_pretty(&stats).map_err(Error::from)?);
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> CliResult<()> {
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut log = RunLog::new(out, "run");
    let outputs = run_seeds(cfg, jobs)?;
    let mut summary: Vec<serde_json::Value> = Vec::new();
    for (i, run) in outputs.into_iter().enumerate() {
        let run = run?;
        let dir = out.join(format!("seed_{i}"));
        let analysis = analyze_run(cfg, &run)?;
        write_run_dir(&dir, &run, Some(&analysis))?;
        log.note(&format!("seed {i} written to {}", dir.display()));
        summary.push(serde_json::to_value(&run.metrics.accuracy).map_err(Error::from)?);
        let acc = &run.metrics.accuracy;
        println!(
            "seed {i}: eval_clean weak {:.3} ce {:.3} poe {:.3} poe_ce {:.3} | eval_anti ce {:.3} poe {:.3} poe_ce {:.3}",
            acc[&Variant::Weak].eval_clean,
            acc[&Variant::CeMain].eval_clean,
            acc[&Variant::PoeMain].eval_clean,
            acc[&Variant::PoeCeMain].eval_clean,
            acc[&Variant::CeMain].eval_anti,
            acc[&Variant::PoeMain].eval_anti,
            acc[&Variant::PoeCeMain].eval_anti,
        );
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "seeds": summary })).map_err(Error::from)? + "\n";
    write_atomic(&out.join("summary.json"), text.as_bytes())?;
    log.finish()
}

fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> CliResult<()> {
    let axis = cfg
        .sweep
        .clone()
        .ok_or_else(|| Failure::config("sweep.axis: required by the sweep command"))?;
    if axis.values.len() == 1 {
        return cmd_run(&cfg.with_knob(axis.knob, axis.values[0])?, jobs);
    }
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut log = RunLog::new(out, "sweep");
    let result = run_sweep(cfg, jobs)?;
    log.note(&format!("{} rows, {} failed cells", result.rows.len(), result.failures.len()));
    write_atomic(&out.join("sweep.csv"), result.rows_csv().as_bytes())?;
    write_atomic(&out.join("sweep_failures.csv"), result.failures_csv().as_bytes())?;
    write_atomic(&out.join("sweep_summary.json"), result.summary_json()?.as_bytes())?;
    let focus = axis.knob.focus();
    for ((k, clean), (_, anti)) in result
        .means(focus, Split::EvalClean)
        .iter()
        .zip(result.means(focus, Split::EvalAnti))
    {
        println!("{}={k}: {} eval_clean {clean:.3} eval_anti {anti:.3}", axis.knob.name(), focus.name());
    }
    if let Some(t) = result.trends.get(&focus) {
        println!("trend: eval_clean {:?}, eval_anti {:?}", t.in_dist.trend, t.anti_bias.trend);
    }
    for f in &result.failures {
        eprintln!("cell {}={} seed {} failed: {}", axis.knob.name(), f.knob_value, f.seed_index, f.error);
    }
    log.finish()
}

fn cmd_analyze(run_dir: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config, None)?;
    let open = |name: &str| -> CliResult<std::io::BufReader<std::fs::File>> {
        let path = run_dir.join(name);
        std::fs::File::open(&path)
            .map(std::io::BufReader::new)
            .map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })
    };
    let with_name = |name: &'static str| move |e: Error| Failure { code: 3, message: format!("{name}: {e}") };
    let bundle = biasgen::load(open("dataset.tsv")?).map_err(with_name("dataset.tsv"))?;
    let weak = Model::read_from(open("weak.model")?).map_err(with_name("weak.model"))?;
    let (ids, rows) = read_dynamics_csv(open("dynamics_weak.csv")?).map_err(with_name("dynamics_weak.csv"))?;
    let analysis = analyze_parts(&cfg, &bundle, &weak, &ids, &rows)?;
    let dest = out.unwrap_or(run_dir);
    for path in write_analysis(dest, &analysis)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), &out),
        Command::Run { config, out, seeds, jobs } => {
            let mut cfg = load_config(config.as_deref(), seeds)?;
            if let Some(o) = out {
                cfg.out = o;
            }
            cmd_run(&cfg, jobs)
        }
        Command::Sweep { config, out, seeds, jobs } => {
            let mut cfg = load_config(Some(&config), seeds)?;
            if let Some(o) = out {
                cfg.out = o;
            }
            cmd_sweep(&cfg, jobs)
        }
        Command::Analyze { run, config, out } => cmd_analyze(&run, config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(|| dispatch(cli));
    let failure = match outcome {
        Ok(Ok(())) => return ExitCode::SUCCESS,
        Ok(Err(f)) => f,
        Err(_) => Failure { code: 3, message: "internal error".into() },
    };
    let _ = writeln!(std::io::stderr(), "error: {}", failure.message);
    ExitCode::from(failure.code)
}
