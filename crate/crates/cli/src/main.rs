use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adcensus::harness::run_round;
use adcensus::simulator::{
    cap_sweep, generate_world, run_experiment, sweep, write_csv, ConfigError, SimConfig, SimError, SweepParameter,
    SweepRow,
};
use adcensus::ThresholdMode;

mod bench;
mod replay;

#[derive(Parser)]
#[command(name = "adcensus", version, about = "Distributed ad counting and targeted-ad detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write a one-row CSV.
    Simulate(Common),
    /// Vary one parameter over values and seeds.
    Sweep(SweepArgs),
    /// Run one protocol round on a simulated week and print message accounting.
    Round(Common),
    /// Report sketch sizes, blinding cost, OPRF latency and message sizes.
    Bench(BenchArgs),
    /// Classify a recorded observation log against a users distribution.
    ClassifyReplay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file, written atomically. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ThresholdMode>,
    #[arg(long, value_enum)]
    privacy: Option<OnOff>,
    /// Comma-separated 1-based user indices that go silent before reporting.
    #[arg(long, value_delimiter = ',')]
    drop: Option<Vec<u32>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// frequency_cap, num_users, mode or targeted_fraction.
    #[arg(long)]
    param: String,
    /// Comma-separated values, or an integer range `a..b` (inclusive).
    #[arg(long)]
    values: String,
    /// Comma-separated seeds, or a range `a..b`. Defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Users in the blinding and message-size runs.
    #[arg(long, default_value_t = 50)]
    users: u32,
    #[arg(long, default_value_t = 1024)]
    oprf_bits: usize,
    #[arg(long, default_value_t = 200)]
    oprf_exchanges: u32,
}

#[derive(Args)]
struct ReplayArgs {
    /// Lines of `timestamp domain ad-key`.
    #[arg(long)]
    observations: PathBuf,
    /// A `users_th <value>` line and `<count> <ad-key>` lines.
    #[arg(long)]
    distribution: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "mean")]
    mode: ThresholdMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ThresholdMode, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(source) => CliError::Config {
                path: "config".into(),
                source,
            },
            SimError::UnknownParameter(_) | SimError::InvalidValue { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(common: &Common) -> Result<SimConfig, CliError> {
    let (text, path) = match &common.config {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_string()),
    };
    let config_err = |source| CliError::Config {
        path: path.clone(),
        source,
    };
    let mut config = SimConfig::from_toml(&text).map_err(config_err)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.mode {
        config.mode = mode;
    }
    if let Some(p) = common.privacy {
        config.privacy = matches!(p, OnOff::On);
    }
    if let Some(drop) = &common.drop {
        config.drop = drop.clone();
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

fn print_resolved(config: &SimConfig) {
    eprintln!("# resolved config");
    for line in config.to_toml().lines() {
        eprintln!("#   {line}");
    }
}

/// Writes to a temporary file next to `path` and renames it into place.
fn write_atomic(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    let Some(path) = path else {
        return std::io::stdout().write_all(bytes).map_err(runtime);
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.persist(path)
        .map_err(|e| CliError::Runtime(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn csv_bytes(rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    write_csv(rows, &mut out)?;
    Ok(out)
}

fn parse_list(text: &str, what: &str) -> Result<Vec<String>, CliError> {
    if let Some((a, b)) = text.split_once("..") {
        let bad = || CliError::Usage(format!("invalid {what} range `{text}`"));
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).map(|v| v.to_string()).collect());
    }
    let items: Vec<String> = text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Usage(format!("empty {what} list")));
    }
    Ok(items)
}

fn cmd_simulate(args: &Common) -> Result<(), CliError> {
    let config = load_config(args)?;
    print_resolved(&config);
    let result = run_experiment(&config)?;
    let c = &result.counts;
    eprintln!(
        "tp {} fn {} fp {} tn {} insufficient {} fn_rate {:.6} fp_rate {:.6}",
        c.tp,
        c.fn_,
        c.fp,
        c.tn,
        c.insufficient(),
        c.fn_rate(),
        c.fp_rate()
    );
    let row = SweepRow {
        parameter: "base".into(),
        seed: config.seed,
        fn_rate: c.fn_rate(),
        fp_rate: c.fp_rate(),
        insufficient_fraction: c.insufficient_fraction(),
        users_th_clear: result.users_th_clear(),
        users_th_cms: result.users_th_cms(),
    };
    write_atomic(args.out.as_deref(), &csv_bytes(&[row])?)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let config = load_config(&args.common)?;
    print_resolved(&config);
    let parameter: SweepParameter = args.param.parse()?;
    let values = parse_list(&args.values, "value")?;
    let seeds: Vec<u64> = match &args.seeds {
        Some(s) => parse_list(s, "seed")?
            .iter()
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("invalid seed `{v}`"))))
            .collect::<Result<_, _>>()?,
        None => vec![config.seed],
    };
    let rows = if parameter == SweepParameter::FrequencyCap {
        let caps: Vec<u32> = values
            .iter()
            .map(|v| parameter.apply(&config, v).map(|c| c.frequency_cap))
            .collect::<Result<_, _>>()?;
        cap_sweep(&config, &caps, &seeds)?
    } else {
        sweep(&config, parameter, &values, &seeds)?
    };
    eprintln!("{} rows", rows.len());
    write_atomic(args.common.out.as_deref(), &csv_bytes(&rows)?)
}

fn cmd_round(args: &Common) -> Result<(), CliError> {
    let config = load_config(args)?;
    print_resolved(&config);
    let world = generate_world(&config);
    let log = world.simulate_week(0);
    let harness = config.harness_config(0).map_err(|source| CliError::Config {
        path: "config".into(),
        source,
    })?;
    let outcome = run_round(&harness, &log.observations(&world)).map_err(runtime)?;
    let th = |t: Option<adcensus::Threshold>| t.map_or("none".to_string(), |t| format!("{:.6}", t.to_f64()));
    eprintln!(
        "users {} missing {:?} distinct_ads {} users_th {}",
        config.num_users,
        outcome.missing,
        outcome.distribution.len(),
        th(outcome.users_th)
    );
    let mut summary = String::from("kind\tcount\tbytes\n");
    for (kind, s) in &outcome.stats {
        summary.push_str(&format!("{kind}\t{}\t{}\n", s.count, s.bytes));
    }
    eprint!("{summary}");
    write_atomic(args.out.as_deref(), outcome.transcript.dump().as_bytes())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Round(a) => cmd_round(&a),
        Command::Bench(a) => bench::run(a.users, a.oprf_bits, a.oprf_exchanges),
        Command::ClassifyReplay(a) => {
            let out = replay::run(&a.observations, &a.distribution, a.mode)?;
            write_atomic(a.out.as_deref(), out.as_bytes())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
