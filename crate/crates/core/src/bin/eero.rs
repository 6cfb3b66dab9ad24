use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use eero::calibration::Correction;
use eero::domain::BudgetSpec;
use eero::io::{self, IoError};
use eero::oracle::OracleMode;
use eero::pipeline::{
    self, exit_code, CalibrateConfig, Calibration, OracleConfig, PipelineError, SweepConfig,
};
use eero::scoring::{ScoreKind, ScoreSpec, DEFAULT_JITTER};
use eero::synth::{self, SynthSpec};

/// Budgeted batch classification with early-exit networks.
#[derive(Parser)]
#[command(name = "eero", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus CSVs).
    Synth(SynthArgs),
    /// Allocate the budget across heads and calibrate exit thresholds.
    Calibrate(CalibrateArgs),
    /// Classify the test split with a calibrated policy.
    Infer(InferArgs),
    /// Best achievable accuracy on the labeled test split for a budget.
    Oracle(OracleArgs),
    /// Calibrate, infer and solve the oracle for a list of budgets.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed in the generator file.
    #[arg(long, env = "EERO_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ScoreArgs {
    /// Confidence score.
    #[arg(long, default_value_t = ScoreKind::BreakingTies)]
    score: ScoreKind,
    /// Seed for the tie-breaking jitter.
    #[arg(long, env = "EERO_SEED", default_value_t = 0)]
    seed: u64,
    /// Jitter upper bound added to each probability.
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    jitter: f64,
    /// Finite-sample correction: none, proportional or additive:<c>.
    #[arg(long, default_value = "proportional")]
    correction: Correction,
}

impl ScoreArgs {
    fn spec(&self) -> ScoreSpec {
        ScoreSpec::new(self.score, self.jitter, self.seed)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Total budget for the batch, in GFlops.
    #[arg(long)]
    budget: f64,
    /// Batch size T; defaults to the test split size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Temperature of the allocation.
    #[arg(long, default_value_t = eero::allocation::DEFAULT_BETA)]
    beta: f64,
    #[command(flatten)]
    score: ScoreArgs,
    /// Output policy file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Policy written by `calibrate`.
    #[arg(long)]
    policy: PathBuf,
    /// Output summary file.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-instance CSV.
    #[arg(long)]
    per_instance: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AtMost,
    Exact,
}

#[derive(Args)]
struct OracleArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Total budget for the test split, in GFlops.
    #[arg(long)]
    budget: f64,
    /// Spend at most the budget, or exactly the budget.
    #[arg(long, value_enum, default_value_t = ModeArg::AtMost)]
    mode: ModeArg,
    /// Greedy upgrades instead of the exact solver.
    #[arg(long)]
    fast: bool,
    /// Cost grid for the exact solver; inferred from head costs by default.
    #[arg(long)]
    resolution: Option<f64>,
    /// Judge correctness by jittered predictions instead of the raw argmax.
    #[arg(long)]
    jittered: bool,
    /// Seed for the jitter when --jittered is set.
    #[arg(long, env = "EERO_SEED", default_value_t = 0)]
    seed: u64,
    /// Output summary file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Total budgets: comma-separated list or linspace:<start>:<stop>:<count>.
    #[arg(long)]
    budgets: String,
    /// Temperature of the allocation.
    #[arg(long, default_value_t = eero::allocation::DEFAULT_BETA)]
    beta: f64,
    #[command(flatten)]
    score: ScoreArgs,
    /// Maximum number of budgets processed in parallel (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with an exit code, printed once at the top level.
struct Failure {
    code: i32,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        PipelineError::from(e).into()
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: exit_code::INVALID,
        message: message.into(),
    }
}

fn parse_budgets(text: &str) -> Result<Vec<f64>, String> {
    if let Some(rest) = text.strip_prefix("linspace:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [a, b, n] = parts[..] else {
            return Err(format!(
                "expected linspace:<start>:<stop>:<count>, got {text:?}"
            ));
        };
        let a: f64 = a.parse().map_err(|e| format!("{a:?}: {e}"))?;
        let b: f64 = b.parse().map_err(|e| format!("{b:?}: {e}"))?;
        let n: usize = n.parse().map_err(|e| format!("{n:?}: {e}"))?;
        return match n {
            0 => Err("linspace needs at least one point".into()),
            1 => Ok(vec![a]),
            _ => Ok((0..n)
                .map(|k| {
                    if k == n - 1 {
                        b
                    } else {
                        a + (b - a) * k as f64 / (n - 1) as f64
                    }
                })
                .collect()),
        };
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let mut spec: SynthSpec = io::read_json(&args.spec).map_err(|e| match e {
        IoError::Parse { .. } => invalid(format!("invalid synth spec: {e}")),
        other => other.into(),
    })?;
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    let dataset = synth::generate(&spec).map_err(|e| invalid(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure {
        code: exit_code::IO,
        message: format!("{}: {e}", args.out.display()),
    })?;
    io::write_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} heads x {} classes to {}",
        dataset.num_heads(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn print_calibration(cal: &Calibration) {
    println!(
        "budget {} for T = {} (mean {} per instance), beta = {}",
        cal.budget.total_budget(),
        cal.budget.batch_size(),
        cal.budget.mean_budget(),
        cal.beta
    );
    println!(
        "{:>4} {:>10} {:>10} {:>10} {:>10} {:>12}",
        "head", "risk", "prior", "epsilon", "seq_rate", "threshold"
    );
    let policy = &cal.policy;
    for l in 0..policy.num_heads() {
        println!(
            "{:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.6}",
            l + 1,
            cal.risks[l],
            cal.prior[l],
            cal.allocation.epsilons[l],
            policy.seq_rates()[l],
            policy.thresholds()[l]
        );
    }
    println!(
        "expected budget per instance {:.6}, multiplier {}, {}",
        cal.allocation.expected_budget,
        cal.allocation.multiplier,
        if cal.allocation.saturated {
            "budget binding"
        } else {
            "budget slack"
        }
    );
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let dataset = io::load_manifest(&args.data)?;
    let batch_size = match args.batch_size {
        Some(t) => t,
        None => dataset
            .test
            .as_ref()
            .map(|s| s.bank.num_instances())
            .ok_or_else(|| {
                invalid("--batch-size is required when the dataset has no test split")
            })?,
    };
    let budget = BudgetSpec::new(args.budget, batch_size).map_err(|e| invalid(e.to_string()))?;
    if !(args.beta.is_finite() && args.beta > 0.0) {
        return Err(invalid(format!(
            "--beta must be positive, got {}",
            args.beta
        )));
    }
    let config = CalibrateConfig {
        budget,
        beta: args.beta,
        score: args.score.spec(),
        correction: args.score.correction,
    };
    let cal = pipeline::calibrate(&dataset, &config)?;
    io::write_json(&args.out, &cal)?;
    print_calibration(&cal);
    info!("policy written to {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), Failure> {
    let dataset = io::load_manifest(&args.data)?;
    let cal: Calibration = io::read_json(&args.policy)?;
    let (result, report) = pipeline::infer(&dataset, &cal)?;
    io::write_json(&args.out, &report)?;
    if let Some(path) = &args.per_instance {
        let ids = &dataset
            .test
            .as_ref()
            .expect("infer checked the test split")
            .instance_ids;
        io::write_per_instance_csv(path, ids, &result)?;
    }
    match report.summary.accuracy {
        Some(a) => println!("accuracy {a:.4}"),
        None => println!("accuracy n/a (no test labels)"),
    }
    println!(
        "consumed {} of {} ({:.2}%), {}",
        report.budget.consumed,
        report.budget.allowed,
        100.0 * report.budget.utilization,
        if report.budget.within_budget {
            "within budget"
        } else {
            "OVER BUDGET"
        }
    );
    let props: Vec<String> = report
        .summary
        .exit_proportions
        .iter()
        .map(|p| format!("{p:.4}"))
        .collect();
    println!("exit proportions {}", props.join(" "));
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let dataset = io::load_manifest(&args.data)?;
    let config = OracleConfig {
        mode: match args.mode {
            ModeArg::AtMost => OracleMode::AtMostBudget,
            ModeArg::Exact => OracleMode::ExactBudget,
        },
        fast: args.fast,
        resolution: args.resolution,
        jitter: args.jittered.then(|| ScoreSpec {
            seed: args.seed,
            ..ScoreSpec::default()
        }),
    };
    let (_, report) = pipeline::run_oracle(&dataset, args.budget, &config)?;
    io::write_json(&args.out, &report)?;
    println!(
        "oracle accuracy {:.4}, consumed {} of {}",
        report.summary.accuracy.unwrap_or(0.0),
        report.budget.consumed,
        report.budget.allowed
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let budgets = parse_budgets(&args.budgets).map_err(invalid)?;
    let dataset = io::load_manifest(&args.data)?;
    let config = SweepConfig {
        beta: args.beta,
        score: args.score.spec(),
        correction: args.score.correction,
        jobs: args.jobs,
        ..SweepConfig::default()
    };
    let rows = pipeline::sweep(&dataset, &budgets, &config)?;
    io::write_sweep_csv(&args.out, &rows)?;
    println!(
        "wrote {} rows for {} budgets to {}",
        rows.len(),
        budgets.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_lists() {
        assert_eq!(parse_budgets("1,2.5, 3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert_eq!(
            parse_budgets("linspace:1:2:3").unwrap(),
            vec![1.0, 1.5, 2.0]
        );
        assert_eq!(parse_budgets("linspace:4:9:1").unwrap(), vec![4.0]);
        assert!(parse_budgets("linspace:1:2").is_err());
        assert!(parse_budgets("1,x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
