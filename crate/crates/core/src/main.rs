use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splitpu::harness::{
    analyze_split, apply_env_overrides, check_spec, run, validate_config, ExperimentSpec,
    HarnessError, SweepAxes,
};

#[derive(Parser)]
#[command(
    name = "splitpu",
    version,
    about = "Hardness-aware positive-unlabeled learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the base settings of a config for every seed (sweep axes ignored).
    Train(Common),
    /// Run every cell of the sweep grid for every seed.
    Sweep(Common),
    /// Oracle noise analysis of the easy/hard split across thresholds.
    AnalyzeSplit(Common),
    /// Check a config and print it with defaults filled in.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and SPLITPU_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config and SPLITPU_JOBS.
    #[arg(long)]
    jobs: Option<usize>,
    /// Allow access to the hidden labels of the unlabeled set.
    #[arg(long)]
    analysis: bool,
}

fn load(c: &Common) -> Result<ExperimentSpec, HarnessError> {
    let mut spec = validate_config(&c.config)?;
    apply_env_overrides(&mut spec)?;
    if let Some(out) = &c.out {
        spec.out_dir = out.clone();
    }
    if let Some(j) = c.jobs {
        spec.jobs = j;
    }
    spec.analysis |= c.analysis;
    check_spec(&spec)?;
    Ok(spec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Validate(c) => {
            let spec = load(&c)?;
            println!("{}", serde_json::to_string_pretty(&spec)?);
        }
        Command::Train(c) => {
            let mut spec = load(&c)?;
            if !spec.sweep.is_empty() {
                log::warn!("train ignores the sweep axes; use `sweep` to run the grid");
                spec.sweep = SweepAxes::default();
            }
            print_summary(&spec)?;
        }
        Command::Sweep(c) => {
            let spec = load(&c)?;
            print_summary(&spec)?;
        }
        Command::AnalyzeSplit(c) => {
            let spec = load(&c)?;
            let a = analyze_split(&spec)?;
            println!("tau\treached\tn_hard\tnoise_easy\tnoise_hard\tnoise_all\ttest_acc");
            for t in &a.taus {
                println!(
                    "{}\t{}/{}\t{:.1}\t{:.4}\t{:.4}\t{:.4}\t{}",
                    t.tau,
                    t.reached_tau,
                    t.seeds,
                    t.mean_n_hard,
                    t.noise_rate_easy,
                    t.noise_rate_hard,
                    t.noise_rate_overall,
                    t.mean_test_accuracy
                        .map(|a| format!("{:.2}", 100.0 * a))
                        .unwrap_or_else(|| "-".into())
                );
            }
            println!("wrote {}", spec.out_dir.join("split_quality.csv").display());
        }
    }
    Ok(())
}

fn print_summary(spec: &ExperimentSpec) -> Result<(), HarnessError> {
    let out = run(spec)?;
    for row in &out.summary {
        match row.n {
            Some(n) => println!("{}\t{}\tn={n}\t{}", row.cell, row.formatted, row.note),
            None => println!("{}\t{}", row.cell, row.note),
        }
    }
    println!("wrote {}", out.out_dir.join("summary.csv").display());
    Ok(())
}
