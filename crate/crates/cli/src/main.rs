use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msid::experiment::{run_bench, run_gen_data, run_gradcheck, run_identify, ExperimentConfig};

/// Multi-step system identification with forward sensitivity gradients.
#[derive(Parser)]
#[command(name = "msid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every restart of an identification experiment.
    Identify(Args),
    /// Time recursive and naive gradients over horizons and parameter counts.
    Bench(Args),
    /// Compare gradient oracles and check analytic Jacobians.
    Gradcheck(Args),
    /// Write synthetic trajectories from the config's generation block.
    GenData(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON experiment config.
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Args {
    fn load(&self) -> msid::Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::from_path(&self.config)?;
        let out = self.output_dir.clone().unwrap_or_else(|| cfg.output_path());
        Ok((cfg, out))
    }
}

fn identify(args: &Args) -> msid::Result<ExitCode> {
    let (cfg, out) = args.load()?;
    let runs = run_identify(&cfg, &out)?;
    let converged = runs.iter().filter(|r| r.converged()).count();
    let exploded = runs.iter().filter(|r| r.exploded()).count();
    println!(
        "{} runs: {converged} converged, {exploded} exploded; results in {}",
        runs.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(args: &Args) -> msid::Result<ExitCode> {
    let (cfg, out) = args.load()?;
    let table = run_bench(&cfg, &out)?;
    print!("{}", table.summary());
    println!("results in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: &Args) -> msid::Result<ExitCode> {
    let (cfg, _) = args.load()?;
    let report = run_gradcheck(&cfg)?;
    println!("{}", report.summary());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn gen_data(args: &Args) -> msid::Result<ExitCode> {
    let (cfg, out) = args.load()?;
    for path in run_gen_data(&cfg, &out)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let result = match &Cli::parse().command {
        Command::Identify(a) => identify(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => gen_data(a),
    };
    result.unwrap_or_else(|err| {
        eprintln!("error: {err}");
        ExitCode::from(2)
    })
}
