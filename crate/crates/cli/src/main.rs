use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sparsepca::bounds::{regime_report, BoundsInput};
use sparsepca::estimators::{EstimatorKind, ThresholdConfig};
use sparsepca::experiment::{
    packing_point, render_text, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, ExperimentOutput, Grid,
    PackingParams,
};
use sparsepca::model::{ModelSpec, ThetaSpec};
use sparsepca::packing::SupportMode;

#[derive(Parser)]
#[command(name = "sparsepca", version, about = "Sparse PCA experiments under the spiked covariance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run any experiment described by a JSON config.
    Simulate(SimulateArgs),
    /// Monte Carlo risk of estimators over a grid of (N, n).
    RiskCurve(RiskCurveArgs),
    /// Regime and rate for one parameter point.
    Bounds(BoundsArgs),
    /// Hypothesis family and Fano lower bound for one parameter point.
    Packing(PackingArgs),
    /// Compare tail bounds with simulated frequencies.
    TailCheck(TailCheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Worker threads (default: all cores); results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Directory for results.csv, replicates.csv and manifest.json;
    /// without it the results table goes to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
    format: TableFormat,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma_dt: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma_bar: Option<f64>,
    #[arg(long)]
    alpha_mult: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, cfg: &mut ThresholdConfig) {
        let pairs = [
            (self.gamma1, &mut cfg.gamma1),
            (self.gamma_dt, &mut cfg.gamma_dt),
            (self.epsilon, &mut cfg.epsilon),
            (self.gamma_bar, &mut cfg.gamma_bar),
            (self.alpha_mult, &mut cfg.alpha_mult),
        ];
        for (flag, slot) in pairs {
            if let Some(v) = flag {
                *slot = v;
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args)]
struct RiskCurveArgs {
    /// Config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "N", value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long = "n", value_delimiter = ',')]
    n: Vec<usize>,
    /// Spike strengths of a standard-basis model.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Estimate the number of spikes instead of using the true one.
    #[arg(long)]
    estimate_rank: bool,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long = "N")]
    dim: usize,
    #[arg(long = "n")]
    n: usize,
    #[arg(long = "M", default_value_t = 1)]
    rank: usize,
    #[arg(long)]
    q: f64,
    #[arg(long = "C")]
    c: f64,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Args)]
struct PackingArgs {
    /// Block size (default: the balancing choice for n and lambda).
    #[arg(long)]
    m: Option<usize>,
    /// Perturbation radius (default: the balancing choice).
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, default_value = "fixed_block")]
    mode: String,
    #[arg(long)]
    q: f64,
    #[arg(long = "C")]
    c: f64,
    #[arg(long = "n")]
    n: usize,
    /// Spike strengths; a single value gives one spike.
    #[arg(long, value_delimiter = ',', required = true)]
    lambda: Vec<f64>,
    /// Perturbed component, zero-based.
    #[arg(long, default_value_t = 0)]
    nu: usize,
    /// Dimension (default: m + M).
    #[arg(long = "N")]
    dim: Option<usize>,
}

#[derive(Args)]
struct TailCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n", value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long = "N", value_delimiter = ',')]
    dims: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
}

fn load_or(config: &Option<PathBuf>, kind: ExperimentKind) -> Result<ExperimentConfig> {
    match config {
        Some(path) => Ok(ExperimentConfig::load(path)?),
        None => Ok(ExperimentConfig {
            kind,
            model: None,
            grid: Grid::default(),
            estimators: Vec::new(),
            estimate_rank: false,
            replicates: 0,
            master_seed: 0,
            thresholds: ThresholdConfig::default(),
            alpha: None,
            packing: PackingParams::default(),
            tails: Default::default(),
            output: None,
        }),
    }
}

fn execute(mut config: ExperimentConfig, run: &RunArgs) -> Result<()> {
    if let Some(seed) = run.seed {
        config.master_seed = seed;
    }
    if let Some(r) = run.replicates {
        config.replicates = r;
    }
    if let Some(dir) = &run.output {
        config.output = Some(dir.clone());
    }
    let output = run_experiment(&config, run.jobs)?;
    emit(&config, &output, run.format)
}

fn emit(config: &ExperimentConfig, output: &ExperimentOutput, format: TableFormat) -> Result<()> {
    for failure in &output.failures {
        eprintln!("warning: {failure}");
    }
    match &config.output {
        Some(dir) => {
            let manifest = write_outputs(dir, config, output)
                .with_context(|| format!("writing results to {}", dir.display()))?;
            println!(
                "wrote {} rows to {} (results {})",
                manifest.rows,
                dir.display(),
                manifest.results_hash
            );
        }
        None => match format {
            TableFormat::Csv => print!("{}", output.results.to_csv()),
            TableFormat::Text => print!("{}", render_text(&output.results)),
        },
    }
    Ok(())
}

fn risk_curve(args: &RiskCurveArgs) -> Result<()> {
    let mut config = load_or(&args.config, ExperimentKind::RiskCurve)?;
    if !args.lambdas.is_empty() {
        config.model = Some(ModelSpec {
            dim: args.dims.first().copied().unwrap_or(1),
            rank: None,
            lambdas: args.lambdas.clone(),
            theta_spec: ThetaSpec::StandardBasis,
        });
    }
    if !args.dims.is_empty() {
        config.grid.dims = args.dims.clone();
    }
    if !args.n.is_empty() {
        config.grid.n = args.n.clone();
    }
    if !args.estimators.is_empty() {
        config.estimators = args
            .estimators
            .iter()
            .map(|e| EstimatorKind::parse(e))
            .collect::<sparsepca::Result<_>>()?;
    }
    config.estimate_rank |= args.estimate_rank;
    args.thresholds.apply(&mut config.thresholds);
    execute(config, &args.run)
}

fn bounds(args: &BoundsArgs) -> Result<()> {
    let report = regime_report(&BoundsInput {
        dim: args.dim,
        n: args.n,
        rank: args.rank,
        q: args.q,
        c: args.c,
        lambda: args.lambda,
        alpha: args.alpha,
    })?;
    match args.format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Text => {
            let mut lines = vec![
                ("regime", report.regime.name().to_string()),
                ("delta_n", format!("{:.6e}", report.delta_n)),
                ("tau2", format!("{:.6e}", report.tau2)),
                ("m_nu", format!("{:.6e}", report.m_nu)),
                ("N_prime", format!("{:.6e}", report.n_prime)),
                ("a_q", format!("{:.6}", report.constants.a_q)),
                ("c_1", format!("{:.6}", report.constants.c_1)),
                ("A_q", format!("{:.6}", report.constants.big_a_q)),
            ];
            if let Some(u) = report.ultra {
                lines.push(("ultra_delta_n", format!("{:.6e}", u.delta_n)));
                lines.push(("ultra_hypothesis", u.hypothesis_holds.to_string()));
                lines.push(("ultra_growth_ratio", format!("{:.6e}", u.growth_ratio)));
            }
            let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in lines {
                println!("{k:<width$}  {v}");
            }
        }
    }
    Ok(())
}

fn packing(args: &PackingArgs) -> Result<()> {
    let params = PackingParams {
        mode: SupportMode::parse(&args.mode)?,
        nu: args.nu,
        m: args.m,
        r: args.r,
    };
    let rank = args.lambda.len();
    let dim = match (args.dim, args.m) {
        (Some(d), _) => d,
        (None, Some(m)) => m + rank,
        (None, None) => {
            return Err(sparsepca::Error::Config {
                key: "N".into(),
                message: "give --N or --m".into(),
            }
            .into())
        }
    };
    let (_, lb) = packing_point(dim, args.n, args.q, args.c, &args.lambda, &params)?;
    let out = serde_json::json!({
        "family_size": lb.family_size,
        "r2": lb.r2,
        "kl_per_member": lb.kl_per_member,
        "fano_a": lb.fano_a,
        "lower_bound": lb.lower_bound,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn tail_check(args: &TailCheckArgs) -> Result<()> {
    let mut config = load_or(&args.config, ExperimentKind::TailCheck)?;
    if !args.n.is_empty() {
        config.grid.n = args.n.clone();
    }
    if !args.dims.is_empty() {
        config.grid.dims = args.dims.clone();
    }
    execute(config, &args.run)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let mut config = ExperimentConfig::load(&args.config)?;
            args.thresholds.apply(&mut config.thresholds);
            execute(config, &args.run)
        }
        Command::RiskCurve(args) => risk_curve(&args),
        Command::Bounds(args) => bounds(&args),
        Command::Packing(args) => packing(&args),
        Command::TailCheck(args) => tail_check(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<sparsepca::Error>()
                .is_none_or(sparsepca::Error::is_config_error);
            ExitCode::from(if config_error { 2 } else { 3 })
        }
    }
}
