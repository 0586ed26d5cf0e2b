use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpr_sue::pipeline::{self, Error, ErrorClass, RunManifest, SweepGrid, SynthSpec};
use vpr_sue::Execution;

/// Benchmark runner for image-matching uncertainty in visual place recognition.
#[derive(Parser)]
#[command(name = "vpr-sue", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct ExecArgs {
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
}

impl ExecArgs {
    fn exec(self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world from a JSON config.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every configured method and write the report.
    Evaluate {
        manifest: PathBuf,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Fit the score fusion on one manifest and apply it to another.
    Fuse {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// AUC-PR of SUE over grids of K and alpha.
    Sweep {
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        alpha_values: Option<Vec<f64>>,
        #[arg(long)]
        fixed_alpha: Option<f64>,
        #[arg(long)]
        fixed_k: Option<usize>,
        /// Defaults to the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 1,
        ErrorClass::Config => 3,
        ErrorClass::MissingInput => 4,
        ErrorClass::Parse => 5,
        ErrorClass::Data => 6,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out } => {
            let spec = SynthSpec::load(&config)?;
            let manifest = pipeline::synthesize(&spec, &out)?;
            println!(
                "wrote {} queries and {} channel(s) to {}",
                spec.world.query_count,
                manifest.external_scores.len(),
                out.display()
            );
        }
        Command::Evaluate { manifest, out, exec } => {
            let manifest = RunManifest::load(&manifest)?;
            let report = pipeline::evaluate(&manifest, exec.exec())?;
            let dir = out.unwrap_or_else(|| manifest.output_dir.clone());
            pipeline::write_report(&report, &dir)?;
            for row in &report.table {
                println!("{:<24} {:.6}", row.method, row.auc_pr);
            }
            for row in report.accuracy.iter().flatten() {
                println!("accuracy {:<15} {:.6}", row.combination, row.accuracy);
            }
        }
        Command::Fuse { train, test, out, exec } => {
            let train = RunManifest::load(&train)?;
            let test = RunManifest::load(&test)?;
            let report = pipeline::fuse(&train, &test, exec.exec())?;
            pipeline::write_fuse_report(&report, &out)?;
            for row in &report.accuracy {
                println!("{:<24} {:.6}", row.combination, row.accuracy);
            }
        }
        Command::Sweep {
            manifest,
            k_values,
            alpha_values,
            fixed_alpha,
            fixed_k,
            out,
            exec,
        } => {
            let manifest = RunManifest::load(&manifest)?;
            let mut grid = SweepGrid::default();
            if let Some(k) = k_values {
                grid.k_values = k;
            }
            if let Some(a) = alpha_values {
                grid.alpha_values = a;
            }
            if let Some(a) = fixed_alpha {
                grid.fixed_alpha = a;
            }
            if let Some(k) = fixed_k {
                grid.fixed_k = k;
            }
            let report = pipeline::sweep(&manifest, &grid, exec.exec())?;
            let dir = out.unwrap_or_else(|| manifest.output_dir.clone());
            pipeline::write_sweep_report(&report, &dir)?;
            for row in &report.rows {
                println!("{:<6} {:<8} {:.6}", row.parameter, row.value, row.auc_pr);
            }
            if let Some(p) = &report.plateau {
                let verdict = if p.pass { "pass" } else { "fail" };
                println!("plateau K=10 {:.6} vs K=1 {:.6}: {verdict}", p.auc_k10, p.auc_k1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
