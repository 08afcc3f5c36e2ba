use std::path::PathBuf;
use std::process::ExitCode;

use autoci::experiment::{run_experiment, EvalReport, ExperimentConfig, ExperimentError, ExperimentKind, Format, Setting};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "autoci", version, about = "Causal variable identification with typed differentiable programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count generic and type-safe candidates per size, optionally ranking them.
    Synth(Common),
    /// AutoCI and the ICP baselines on random linear SCMs.
    Toy(Common),
    /// AutoCI and Cox hazard table on the two-trial survival cohort.
    Survival(Common),
    /// Classic and test-swapped ICP on random linear SCMs.
    Baselines(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Finite,
    Abcd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated report formats.
    #[arg(long, value_delimiter = ',')]
    format: Option<Vec<String>>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Program to train, e.g. "COMP(nn, CAT(FILTER(pred)))".
    #[arg(long)]
    program: Option<String>,
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Record wall-times.
    #[arg(long)]
    timing: bool,
}

fn config_for(kind: ExperimentKind, c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(kind),
    };
    cfg.kind = match (kind, c.setting) {
        (ExperimentKind::ToyFinite, Some(SettingArg::Abcd)) => ExperimentKind::ToyAbcd,
        (ExperimentKind::ToyFinite, Some(SettingArg::Finite)) => ExperimentKind::ToyFinite,
        (ExperimentKind::ToyFinite, None) if cfg.kind == ExperimentKind::ToyAbcd => ExperimentKind::ToyAbcd,
        (k, _) => k,
    };
    if let Some(s) = c.setting {
        cfg.setting = match s {
            SettingArg::Finite => Setting::Finite,
            SettingArg::Abcd => Setting::Abcd,
        };
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(fs) = &c.format {
        cfg.formats = fs
            .iter()
            .map(|f| match f.trim() {
                "csv" => Ok(Format::Csv),
                "json" => Ok(Format::Json),
                other => Err(ExperimentError::Config(format!("unknown format `{other}`"))),
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(p) = &c.program {
        cfg.program = p.clone();
    }
    if let Some(r) = c.replicates {
        cfg.replicates = r;
    }
    cfg.timing |= c.timing;
    Ok(cfg)
}

fn print_summary(report: &EvalReport) {
    for m in &report.methods {
        println!(
            "{:<11} {:<9} n={:<4} JS {:.3} ± {:.3}  FWER {:.3}  failures {}",
            m.method, m.setting, m.replicates, m.mean_js, m.std_js, m.fwer, m.failures
        );
    }
    for c in &report.synthesis {
        println!("size {}: {} generic, {} type-safe", c.size, c.generic_count, c.typesafe_count);
    }
    for h in &report.hazard {
        println!(
            "{:<12} p_warm {:.2}  p_full {:.2}  HR {:.2} ({:.2}-{:.2})",
            h.variable, h.causal_prob_warmup, h.causal_prob_full, h.hazard_ratio, h.ci_low, h.ci_high
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Synth(c) => (ExperimentKind::Synth, c),
        Command::Toy(c) => (ExperimentKind::ToyFinite, c),
        Command::Survival(c) => (ExperimentKind::Survival, c),
        Command::Baselines(c) => (ExperimentKind::Baselines, c),
    };
    let result = config_for(kind, common).and_then(|cfg| run_experiment(&cfg).map(|r| (cfg, r)));
    match result {
        Ok((cfg, report)) => {
            print_summary(&report);
            println!("reports written to {}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
