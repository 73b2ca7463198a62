use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ordtox::analysis::{run, AnalysisConfig, ContrastSpec, Method};
use ordtox::contrasts::ContrastMatrix;
use ordtox::data::{parse_long_csv, parse_table_csv, Dataset, LongSchema};
use ordtox::perm::{parse_exact, DEFAULT_REPLICATES};
use ordtox::sim::{estimate_error_rates_with_progress, SimConfig};
use ordtox::Alternative;
use rand::Rng;

#[derive(Parser, Debug)]
#[command(
    name = "ordtox",
    version,
    about = "Multiple contrast tests for graded severity dose-response data"
)]
struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputFormat {
    Long,
    Table,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one test on a dataset and print the report
    Analyze(Box<AnalyzeArgs>),
    /// Estimate familywise error and power by simulation
    Simulate {
        /// TOML configuration file
        #[arg(long)]
        config: PathBuf,
        /// Where to write the JSON report
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert between long (one row per subject) and count-table CSV
    Tabulate {
        #[arg(long)]
        input: PathBuf,
        /// Format of the input; the output uses the other one
        #[arg(long, value_enum)]
        format: InputFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "long")]
    format: InputFormat,
    /// perm-maxmax, ft-dunnett, glm-dunnett, propodds-dunnett, multinomial-dunnett, releff or tukeytrend
    #[arg(long)]
    method: String,
    /// dunnett, williams or custom=FILE
    #[arg(long, default_value = "dunnett")]
    contrast: String,
    /// greater, less or two-sided
    #[arg(long, default_value = "greater")]
    alternative: String,
    /// Cut-points c for the endpoints severity > c (default: all)
    #[arg(long, value_delimiter = ',')]
    cutpoints: Option<Vec<i64>>,
    /// Add the raw score as an extra endpoint
    #[arg(long)]
    include_raw_score: bool,
    /// Monte Carlo permutation replicates
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    nperm: usize,
    /// Seed for every random component (default: drawn and reported)
    #[arg(long)]
    seed: Option<u64>,
    /// Exact enumeration: auto, on or off
    #[arg(long, default_value = "auto")]
    exact: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// One dose per group, in group order
    #[arg(long, value_delimiter = ',')]
    doses: Option<Vec<f64>>,
    /// Dose used in place of 0 for the log scaling
    #[arg(long)]
    zero_dose: Option<f64>,
    /// Group label to use as control (default: first group)
    #[arg(long)]
    control: Option<String>,
    /// Declared grade range MIN,MAX for long input (default: observed)
    #[arg(long, value_parser = parse_range)]
    grade_range: Option<(i64, i64)>,
    /// Scale multinomial covariances by the Pearson dispersion
    #[arg(long)]
    overall_dispersion: bool,
    #[arg(long, value_enum, default_value = "json")]
    output: OutputFormat,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let (a, b) = (
        a.trim().parse::<i64>().map_err(|e| e.to_string())?,
        b.trim().parse::<i64>().map_err(|e| e.to_string())?,
    );
    if a >= b {
        return Err("MIN must be below MAX".into());
    }
    Ok((a, b))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))
}

fn load(path: &Path, format: InputFormat, grade_range: Option<(i64, i64)>) -> Result<Dataset, Failure> {
    let f = open(path)?;
    match format {
        InputFormat::Long => parse_long_csv(
            f,
            &LongSchema {
                grade_range,
                ..LongSchema::default()
            },
        )
        .map_err(usage),
        InputFormat::Table => parse_table_csv(f).and_then(|t| t.expand()).map_err(usage),
    }
}

/// Writes everything at once so that failures leave no partial output.
fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| runtime(format!("cannot write {}: {e}", p.display()))),
        None => io::stdout().lock().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let method: Method = args.method.parse().map_err(usage)?;
    let alternative: Alternative = args.alternative.parse().map_err(usage)?;
    let exact = parse_exact(&args.exact).map_err(usage)?;
    if args.nperm == 0 {
        return Err(usage("--nperm must be positive"));
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    let grade_range = args.grade_range;
    if grade_range.is_some() && matches!(args.format, InputFormat::Table) {
        return Err(usage("--grade-range applies to long input only"));
    }

    let mut d = load(&args.input, args.format, grade_range)?;
    if let Some(c) = &args.control {
        d = d.with_control(c).map_err(usage)?;
    }
    if !d.comparisons_possible() {
        return Err(usage("no comparisons possible: only one group"));
    }
    if let Some(cuts) = &args.cutpoints {
        if let Some(c) = cuts.iter().find(|&&c| c < d.grade_min() || c >= d.grade_max()) {
            return Err(usage(format!(
                "cutpoint {c} outside [{}, {}]",
                d.grade_min(),
                d.grade_max() - 1
            )));
        }
    }
    let contrast = match args.contrast.as_str() {
        "dunnett" => ContrastSpec::Dunnett,
        "williams" => ContrastSpec::Williams,
        s => match s.strip_prefix("custom=") {
            Some(file) => {
                let k = ContrastMatrix::from_csv(open(Path::new(file))?, &d.group_sizes()).map_err(usage)?;
                if k.n_groups() != d.n_groups() {
                    return Err(usage("custom contrast columns do not match the groups"));
                }
                ContrastSpec::Custom(k)
            }
            None => return Err(usage(format!("unknown contrast `{s}`"))),
        },
    };
    let doses = match (&args.doses, method.needs_doses()) {
        (Some(doses), _) => {
            if doses.len() != d.n_groups() {
                return Err(usage(format!(
                    "{} doses given for {} groups",
                    doses.len(),
                    d.n_groups()
                )));
            }
            Some(doses.clone())
        }
        (None, true) => match d.group_doses() {
            Ok(doses) if doses.iter().all(|v| v.is_finite()) => Some(doses),
            _ => return Err(usage(format!("method {method} needs --doses (or a dose column)"))),
        },
        (None, false) => None,
    };
    let seed = match args.seed {
        Some(s) => s,
        None => {
            let s = rand::rng().random::<u64>();
            eprintln!("seed: {s}");
            s
        }
    };

    let cfg = AnalysisConfig {
        method,
        contrast,
        alternative,
        cutpoints: args.cutpoints.clone(),
        include_raw_score: args.include_raw_score,
        nperm: args.nperm,
        seed,
        exact,
        alpha: args.alpha,
        doses,
        zero_dose_substitute: args.zero_dose,
        multinomial_overall_dispersion: args.overall_dispersion,
        ..AnalysisConfig::default()
    };
    let report = run(&d, &cfg).map_err(runtime)?;
    let text = match args.output {
        OutputFormat::Json => report.to_json() + "\n",
        OutputFormat::Csv => report.to_csv(),
    };
    emit(&text, args.out.as_deref())
}

fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config).map_err(|e| usage(format!("cannot read {}: {e}", config.display())))?;
    let cfg = SimConfig::from_toml(&text).map_err(usage)?;
    let n = cfg.nsim;
    let step = (n / 10).max(1);
    let report = estimate_error_rates_with_progress(&cfg, |done| {
        if done % step == 0 || done == n {
            eprintln!("simulated {done}/{n}");
        }
    })
    .map_err(runtime)?;
    emit(&(report.to_json() + "\n"), Some(out))
}

fn tabulate(input: &Path, format: InputFormat, out: Option<&Path>) -> Result<(), Failure> {
    let d = load(input, format, None)?;
    let text = match format {
        InputFormat::Long => d.collapse().to_csv(),
        InputFormat::Table => d.to_long_csv(),
    };
    emit(&text, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Analyze(args) => analyze(*args),
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Tabulate { input, format, out } => tabulate(&input, format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
