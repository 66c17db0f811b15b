use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradsparse::Exec;
use gradsparse_cli::{checks, commands, CliError, DumpStage, ExperimentConfig, Overrides, RunMode};

#[derive(Parser)]
#[command(
    name = "gradsparse",
    version,
    about = "Sparse CNN training and accelerator simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; replaces `out` of the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target sparsity; enables pruning when the file has none.
    #[arg(long = "prune-p")]
    prune_p: Option<f64>,
    #[arg(long = "fifo-depth")]
    fifo_depth: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<RunMode>,
    /// Run everything on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline, the pruned network or both side by side.
    Train(Common),
    /// Trace one training step and run it through the accelerator model.
    Simulate(Common),
    /// Print the row instructions of one CONV layer.
    DumpSchedule {
        #[command(flatten)]
        common: Common,
        /// Network layer index of a CONV layer.
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value = "forward")]
        stage: DumpStage,
    },
    /// Quick correctness checks; exits 3 when one fails.
    Selftest,
}

fn load(c: &Common) -> Result<(ExperimentConfig, Exec), CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        prune_p: c.prune_p,
        fifo_depth: c.fifo_depth,
    })?;
    cfg.validate()?;
    let exec = if c.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    Ok((cfg, exec))
}

fn dispatch(cmd: Command) -> Result<bool, CliError> {
    match cmd {
        Command::Train(c) => {
            let (cfg, exec) = load(&c)?;
            let (tr, csv) = commands::cmd_train(&cfg, c.mode, exec)?;
            for w in &tr.warnings {
                eprintln!("warning: {w}");
            }
            for r in &tr.runs {
                if let Some(last) = r.reports.last() {
                    print!(
                        "{}: loss {:.4} accuracy {:.4}",
                        r.name, last.loss, last.accuracy
                    );
                    if let Some((l, a)) = r.held_out.last() {
                        print!(" held-out loss {l:.4} accuracy {a:.4}");
                    }
                    println!();
                }
            }
            println!("wrote {}", csv.display());
        }
        Command::Simulate(c) => {
            let (cfg, exec) = load(&c)?;
            let (sim, files) = commands::cmd_simulate(&cfg, c.mode, exec)?;
            for r in &sim.reports {
                println!(
                    "{}: {} cycles, {:.1} pJ",
                    r.mode.name(),
                    r.total_cycles(),
                    r.total_energy()
                );
            }
            if let (Some(s), Some(e)) = (sim.speedup(), sim.energy_ratio()) {
                println!("speedup {s:.2} energy_ratio {e:.2}");
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::DumpSchedule {
            common,
            layer,
            stage,
        } => {
            let (cfg, _) = load(&common)?;
            let (text, _) = commands::cmd_dump(&cfg, layer, stage)?;
            print!("{text}");
        }
        Command::Selftest => {
            let results = checks::quick();
            for c in &results {
                println!("{c}");
            }
            return Ok(results.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes are config errors; --help and --version are not.
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
