use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use d3s_core::config::{load_config, locate_key, RunConfig};
use d3s_core::runner::{
    compare, read_select_inputs, select_records, train_to_dir, verify, write_select_outputs,
    VerifyOptions,
};
use d3s_core::selector::SelectionMode;
use d3s_core::Error;

#[derive(Parser)]
#[command(name = "d3s", version, about = "Dynamic dual-level down-sampling lab for group-relative policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// JSON config file; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.jsonl, config.echo.json, policy.bin.
    Train(RunFlags),
    /// Run the theory checks; exits 0 iff all pass.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        max_m: usize,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        max_group: usize,
    },
    /// Train two configurations over several seeds and compare them.
    Compare {
        /// Baseline config.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Candidate config.
        #[arg(long)]
        b: Option<PathBuf>,
        /// Overrides applied to the baseline only.
        #[arg(long = "set-a", value_name = "KEY=VALUE")]
        set_a: Vec<String>,
        /// Overrides applied to the candidate only.
        #[arg(long = "set-b", value_name = "KEY=VALUE")]
        set_b: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Eval score to reach; defaults to the baseline's final score per seed.
        #[arg(long)]
        threshold: Option<f64>,
        /// Optional path for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select rollouts from a JSONL file of {group, rollout, advantage, reward?}.
    Select {
        /// Input file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: String,
        #[arg(long, value_enum, default_value_t = Mode::Within)]
        mode: Mode,
        /// Samples per group (cross-group mode keeps n times the group count).
        #[arg(long)]
        n: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Within,
    Cross,
    Pods,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Within => SelectionMode::WithinGroup,
            Mode::Cross => SelectionMode::CrossGroup,
            Mode::Pods => SelectionMode::PodsRewardVariance,
        }
    }
}

/// Config errors point at the offending line of the file when possible.
fn config_message(path: Option<&Path>, err: &Error) -> String {
    let text = path.and_then(|p| fs::read_to_string(p).ok());
    let name = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
    match err {
        Error::Config { key, .. } => match text.as_deref().and_then(|t| locate_key(t, key)) {
            Some(line) => format!("{name}:{line}: {err}"),
            None => format!("{name}: {err}"),
        },
        Error::Json(_) => match text
            .as_deref()
            .map(serde_json::from_str::<RunConfig>)
        {
            Some(Err(e)) if e.line() > 0 => format!("{name}:{}:{}: {e}", e.line(), e.column()),
            _ => format!("{name}: {err}"),
        },
        _ => format!("{name}: {err}"),
    }
}

fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, String> {
    load_config(path, sets).map_err(|e| format!("invalid config: {}", config_message(path, &e)))
}

fn run_flags_config(flags: &RunFlags) -> Result<RunConfig, String> {
    let mut sets = flags.sets.clone();
    if let Some(seed) = flags.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(out) = &flags.out {
        sets.push(format!("out_dir={}", serde_json::Value::String(out.display().to_string())));
    }
    load(flags.config.as_deref(), &sets)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = run_flags_config(&flags)?;
            let run = train_to_dir(&cfg).map_err(|e| format!("training aborted: {e}"))?;
            let dir = run.run_dir.expect("train_to_dir always creates a run directory");
            println!("{}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            seed,
            trials,
            max_m,
            probes,
            max_group,
        } => {
            let opts = VerifyOptions {
                lemma_max_m: max_m,
                lemma_trials: trials,
                max_adv_max_g: max_group,
                probes,
                seed,
                ..VerifyOptions::default()
            };
            let report = verify(&opts).map_err(|e| e.to_string())?;
            print!("{}", report.human());
            println!("{}", report.summary_line().map_err(|e| e.to_string())?);
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Compare {
            a,
            b,
            set_a,
            set_b,
            seeds,
            threshold,
            out,
        } => {
            let ca = load(a.as_deref(), &set_a)?;
            let cb = load(b.as_deref(), &set_b)?;
            let report = compare(&ca, &cb, &seeds, threshold).map_err(|e| e.to_string())?;
            let steps = |v: &[Option<usize>]| {
                v.iter()
                    .map(|s| s.map_or("-".to_string(), |x| x.to_string()))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            println!("{:<10} {:>18} {:>12} {:>12} {:>12}", "config", "steps_to_thresh", "final_avg", "mean_tcr", "mean_gnorm");
            for (name, s) in [("A", &report.a), ("B", &report.b)] {
                println!(
                    "{:<10} {:>18} {:>12.4} {:>12.4} {:>12.4e}",
                    name,
                    steps(&s.steps_to_threshold),
                    s.final_avg,
                    s.mean_token_consumption,
                    s.mean_grad_norm
                );
            }
            match report.speedup {
                Some(x) => println!("speedup (A steps / B steps): {x:.3}"),
                None => println!("speedup (A steps / B steps): undefined"),
            }
            let json = serde_json::to_string(&report).map_err(|e| e.to_string())?;
            println!("{json}");
            if let Some(path) = out {
                fs::write(&path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Select { input, mode, n } => {
            let mut text = String::new();
            if input == "-" {
                io::stdin().read_to_string(&mut text).map_err(|e| e.to_string())?;
            } else {
                text = fs::read_to_string(&input).map_err(|e| format!("{input}: {e}"))?;
            }
            let rows = read_select_inputs(text.as_bytes()).map_err(|e| e.to_string())?;
            let selected = select_records(&rows, mode.into(), n).map_err(|e| e.to_string())?;
            write_select_outputs(&mut io::stdout().lock(), &selected).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let level = std::env::var("D3S_LOG_LEVEL").unwrap_or_else(|_| "info".to_string());
    env_logger::Builder::new().parse_filters(&level).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
