use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use packplan::harness::{emit_report, read_trace, replay, run_batch, write_trace, NoiseSetting, ReportFormat, Scenario};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "pack", version, about = "Simulated bimanual packing trials")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Machine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a batch of trials and print the success table.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's trial count.
        #[arg(long)]
        trials: Option<u64>,
        /// Overrides the scenario's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Where to write the report, in `--format`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Noise preset name: zero, lab or competition.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Where to write the line-delimited trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check the scenario and its skill graph.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Re-execute a trace and compare world and trace hashes.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Run {
            scenario,
            trials,
            seed,
            jobs,
            report,
            noise,
            format,
            trace,
        } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(t) = trials {
                sc.trials = t;
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(n) = noise {
                sc.scene.noise = NoiseSetting::Preset(n).resolve()?;
            }
            let problems = sc.validate();
            if !problems.is_empty() {
                bail!("invalid scenario:\n  {}", problems.join("\n  "));
            }
            let started = Instant::now();
            let rep = run_batch(&sc, jobs)?;
            print!("{}", emit_report(&rep.rows, ReportFormat::Text));
            let recoveries: usize = rep.traces.iter().map(|t| t.recoveries).sum();
            println!(
                "{} trials from seed {}: {} fully successful, {} recovery tasks inserted, {:.1} s",
                sc.trials,
                sc.seed,
                rep.full_successes(),
                recoveries,
                started.elapsed().as_secs_f64()
            );
            if let Some(path) = report {
                let fmt = match format {
                    Format::Text => ReportFormat::Text,
                    Format::Machine => ReportFormat::Machine,
                };
                std::fs::write(&path, emit_report(&rep.rows, fmt)).with_context(|| path.display().to_string())?;
            }
            if let Some(path) = trace {
                let f = std::fs::File::create(&path).with_context(|| path.display().to_string())?;
                let mut w = std::io::BufWriter::new(f);
                write_trace(&sc, &rep.traces, &mut w)?;
                w.flush()?;
            }
        }
        Cmd::Validate { scenario } => {
            let sc = Scenario::load(&scenario)?;
            for d in sc.graph.validate() {
                println!("{d}");
            }
            let problems = sc.validate();
            if !problems.is_empty() {
                bail!("invalid scenario:\n  {}", problems.join("\n  "));
            }
            println!("{}: ok ({} subtasks)", sc.name, sc.task.subtask_count());
        }
        Cmd::Replay { trace } => {
            let text = std::fs::read_to_string(&trace).with_context(|| trace.display().to_string())?;
            let loaded = read_trace(&text)?;
            let mut bad = 0;
            for r in replay(&loaded)? {
                let ok = r.state_match && r.trace_match;
                bad += usize::from(!ok);
                println!(
                    "trial {}: world {} trace {}",
                    r.trial,
                    if r.state_match { "match" } else { "MISMATCH" },
                    if r.trace_match { "match" } else { "MISMATCH" }
                );
            }
            if bad > 0 {
                bail!("{bad} trial(s) did not replay");
            }
        }
    }
    Ok(())
}
