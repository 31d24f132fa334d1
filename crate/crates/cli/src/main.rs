use clap::{Args, Parser, Subcommand};
use hps_cli::config::{kind_name, ExperimentKind, LoadedConfig};
use hps_cli::experiments::run_experiment;
use hps_cli::output::{sidecar, sidecar_path, write_csv};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hps", version, about = "Hard parameter sharing risk simulations and limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment with Monte Carlo replicates.
    Simulate(Common),
    /// Evaluate limits only (no sampling).
    Theory(Common),
    /// Regime report for model-shift configurations.
    Regimes(Common),
    /// Progressive source-batch procedure.
    Progressive(Common),
    /// Multi-task width sweep.
    Multitask(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// CSV destination; stdout when neither this nor `output` is set.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Reject configs outside the proven dimension range instead of warning.
    #[arg(long)]
    strict: bool,
}

enum Failure {
    Config(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Numeric(m) | Failure::Io(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (args, expected, theory_only) = match cli.command {
        Command::Simulate(a) => (a, None, false),
        Command::Theory(a) => (a, None, true),
        Command::Regimes(a) => (a, Some(ExperimentKind::Regimes), false),
        Command::Progressive(a) => (a, Some(ExperimentKind::Progressive), false),
        Command::Multitask(a) => (a, Some(ExperimentKind::Multitask), false),
    };
    let mut cfg = LoadedConfig::load(&args.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(kind) = expected {
        if cfg.config.experiment != kind {
            return Err(Failure::Config(format!("{}: experiment is `{}`, expected `{}`", cfg.path, kind_name(cfg.config.experiment), kind_name(kind))));
        }
    }
    if let Some(seed) = args.seed {
        cfg.config.master_seed = seed;
    }
    if let Some(r) = args.replicates {
        cfg.config.replicates = r;
    }
    if theory_only {
        cfg.config.replicates = 0;
    }
    if let Some(out) = args.out {
        cfg.config.output = Some(out);
    }
    cfg.validate(args.strict).map_err(|e| Failure::Config(e.to_string()))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::Io(e.to_string()))?;
    let outcome = pool.install(|| run_experiment(&cfg)).map_err(|e| match e.exit_code() {
        3 => Failure::Numeric(e.to_string()),
        _ => Failure::Config(e.to_string()),
    })?;

    if cfg.config.experiment == ExperimentKind::Regimes {
        if let Some(lines) = outcome.report["summary"].as_array() {
            for l in lines {
                eprintln!("{}", l.as_str().unwrap_or_default());
            }
        }
    }
    let meta = sidecar(&cfg.config, &outcome.report);
    match &cfg.config.output {
        Some(path) => {
            let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", path.display()));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io)?;
            }
            let file = std::fs::File::create(path).map_err(io)?;
            write_csv(&outcome.rows, std::io::BufWriter::new(file)).map_err(|e| Failure::Io(e.to_string()))?;
            let side = sidecar_path(path);
            let text = serde_json::to_string_pretty(&meta).expect("serializable");
            std::fs::write(&side, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", side.display())))?;
        }
        None => {
            let stdout = std::io::stdout();
            write_csv(&outcome.rows, stdout.lock()).map_err(|e| Failure::Io(e.to_string()))?;
            let mut err = std::io::stderr();
            writeln!(err, "{}", serde_json::to_string(&meta).expect("serializable")).map_err(|e| Failure::Io(e.to_string()))?;
        }
    }
    Ok(())
}
