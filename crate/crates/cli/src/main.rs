//! `rrsynth`: synthetic data with range-restricted privacy accounting.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rrsynth_core::experiments::{
    run_experiment_budget_ordering, run_experiment_equal_budget, run_experiment_n_grid, run_experiment_tail_widening,
    write_experiment,
};
use rrsynth_core::pipeline::REPORT_FILE;
use rrsynth_core::{
    ecdf_metrics, load_csv, run_pipeline, simulate, CsvSchema, KeyValues, PipelineConfig, RunReport, Through,
};

#[derive(Parser, Debug)]
#[command(name = "rrsynth", version)]
#[command(about = "Risk-weighted synthetic data with range-restricted privacy budgets", long_about = None)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a simulated population to CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Record count; defaults to the config's `n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Stage-1 fit, risk weights, knowledge probabilities and stage-2 fits.
    Fit(Common),
    /// Fits plus per-standard privacy accounts.
    Account(Common),
    /// Accounts plus synthetic datasets.
    Synthesize(Common),
    /// Utility of the pipeline's synthetic data, or of an existing synthetic
    /// CSV against the confidential data.
    Utility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// The whole pipeline.
    Run(Common),
    /// Replicated simulation experiments.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExperimentKind {
    Ordering,
    EqualBudget,
    Tail,
    Ngrid,
}

/// Config file plus flag overrides. Flags win over the file.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Standard to account (repeatable): unweighted, weighted, averaged, truncated.
    #[arg(long = "standard")]
    standards: Vec<String>,
    /// Multiplier range `a,b` (repeatable).
    #[arg(long = "range", allow_hyphen_values = true)]
    ranges: Vec<String>,
    #[arg(long)]
    s_draws: Option<usize>,
    #[arg(long)]
    m_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long)]
    top_fraction: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Confidential CSV; the simulation is used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path).map_err(|e| anyhow!("config: {e}"))?,
            None => KeyValues::default(),
        };
        if !self.standards.is_empty() {
            kv.set("standards", self.standards.join(","));
        }
        if !self.ranges.is_empty() {
            kv.set("ranges", self.ranges.join(";"));
        }
        let mut set = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(key, v);
            }
        };
        set("s_draws", self.s_draws.map(|v| v.to_string()));
        set("m_draws", self.m_draws.map(|v| v.to_string()));
        set("seed", self.seed.map(|v| v.to_string()));
        set("scale", self.scale.map(|v| v.to_string()));
        set("target_epsilon", self.target_epsilon.map(|v| v.to_string()));
        set("top_fraction", self.top_fraction.map(|v| v.to_string()));
        set("replicates", self.replicates.map(|v| v.to_string()));
        set("input", self.input.as_ref().map(|p| p.display().to_string()));
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        PipelineConfig::from_key_values(&kv).map_err(|e| anyhow!("config: {e}"))
    }
}

fn print_run(report: &RunReport, cfg: &PipelineConfig) {
    println!(
        "{:<16} {:>12} {:>12} {:>8} {:>10} {:>10}",
        "variant", "epsilon", "delta", "scale", "max_ecdf", "avg_ecdf"
    );
    for v in &report.variants {
        let (mx, avg) = v.utility.as_ref().map_or(("-".to_string(), "-".to_string()), |u| {
            (format!("{:.4}", u.max_ecdf), format!("{:.5}", u.avg_ecdf))
        });
        println!(
            "{:<16} {:>12.4} {:>12.4} {:>8.3} {:>10} {:>10}",
            v.label, v.account.epsilon, v.account.delta, v.scale, mx, avg
        );
    }
    println!("report: {}", cfg.out.join(REPORT_FILE).display());
}

fn pipeline(common: &Common, through: Through) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let report = run_pipeline(&cfg, through)?;
    print_run(&report, &cfg);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { common, n } => {
            let cfg = common.config()?;
            let data = simulate(&cfg.simulation_for(cfg.seed, n.unwrap_or(cfg.simulation.n)))?;
            std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            let path = cfg.out.join("data.csv");
            data.write_csv(&path)?;
            println!("{} records -> {}", data.n(), path.display());
        }
        Command::Fit(common) => pipeline(&common, Through::Fit)?,
        Command::Account(common) => pipeline(&common, Through::Account)?,
        Command::Synthesize(common) => pipeline(&common, Through::Synthesize)?,
        Command::Run(common) => pipeline(&common, Through::Utility)?,
        Command::Utility {
            common,
            synthetic: None,
        } => pipeline(&common, Through::Utility)?,
        Command::Utility {
            common,
            synthetic: Some(path),
        } => {
            let cfg = common.config()?;
            let data = cfg.load_data(cfg.seed)?;
            // Only the outcome column matters for the ECDF comparison.
            let schema = CsvSchema {
                outcome: data.outcome_label().to_string(),
                predictors: Vec::new(),
                intercept: true,
            };
            let syn = load_csv(&path, &schema)?;
            if syn.n() == 0 {
                bail!("{} has no records", path.display());
            }
            let m = ecdf_metrics(data.outcomes(), syn.outcomes())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Experiment { kind, common } => {
            let cfg = common.config()?;
            let manifest = match kind {
                ExperimentKind::Ordering => {
                    let r = run_experiment_budget_ordering(&cfg)?;
                    println!(
                        "ordering chain holds in {:.2} of {} replicates",
                        r.chain.fraction, r.replicates
                    );
                    write_experiment(&cfg.out, "ordering", &r, &r.rows)?
                }
                ExperimentKind::EqualBudget => {
                    let r = run_experiment_equal_budget(&cfg)?;
                    println!(
                        "median scales: weighted {:.3}, {} {:.3}",
                        r.weighted_scale.median, r.labels[1], r.trunc_wide_scale.median
                    );
                    let rows: Vec<_> = r.replicates.iter().map(|x| x.row.clone()).collect();
                    write_experiment(&cfg.out, "equal_budget", &r, &rows)?
                }
                ExperimentKind::Tail => {
                    let r = run_experiment_tail_widening(&cfg)?;
                    println!(
                        "epsilon chain holds in {:.2}; max-ECDF monotone in {:.2}",
                        r.epsilon_chain.fraction, r.max_ecdf_monotone
                    );
                    write_experiment(&cfg.out, "tail", &r, &r.rows)?
                }
                ExperimentKind::Ngrid => {
                    let r = run_experiment_n_grid(&cfg)?;
                    for (label, ratio) in &r.iqr_ratio {
                        println!("{label:<16} IQR ratio {ratio:.3}");
                    }
                    write_experiment(&cfg.out, "ngrid", &r, &r.rows)?
                }
            };
            for a in manifest {
                println!("wrote {}", cfg.out.join(a.file).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
