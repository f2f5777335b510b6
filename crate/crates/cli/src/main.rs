//! `kkl`: train, certify and validate learned KKL observers from a TOML run
//! configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kkl_core::pipeline::{self, PipelineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "kkl",
    version,
    about = "Learned KKL observers with certified error bounds"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset.
    GenData,
    /// Physics-informed training of the forward map.
    Train,
    /// Hard-point fine-tuning of the forward map.
    Finetune,
    /// Train the inverse map against the frozen forward map.
    TrainInverse,
    /// Certify the residual, Lipschitz and reconstruction bounds.
    Certify,
    /// Assemble the error certificate.
    Certificate {
        /// Explicit `R,L,E[,v]` instead of the certification report.
        #[arg(long, value_delimiter = ',')]
        quantities: Option<Vec<f64>>,
    },
    /// Simulate the observer and compare the error envelope with the certificate.
    Simulate,
    /// Collect all stage outputs into one report.
    Report,
    /// Run every stage in order.
    Run,
    /// Print the resolved configuration with all defaults.
    Config,
}

fn load(global: &Global) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &global.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load(&cli.global)?;
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&cfg)?;
            println!(
                "{} of {} initial conditions kept ({} discarded); {} collocation runs discarded",
                m.attempted - m.discarded,
                m.attempted,
                m.discarded,
                m.collocation_discarded
            );
        }
        Command::Train => {
            let h = pipeline::train(&cfg)?;
            println!(
                "forward loss {:.6e} -> {:.6e} over {} steps",
                h.initial(),
                h.last(),
                h.steps
            );
        }
        Command::Finetune => {
            let r = pipeline::finetune(&cfg)?;
            for (i, m) in r.rounds.iter().enumerate() {
                println!(
                    "round {i}: mined mean {:.6e} -> {:.6e} ({} iterations)",
                    m.mined_mean, m.mined_mean_after, m.iterations
                );
            }
        }
        Command::TrainInverse => {
            let h = pipeline::train_inverse_stage(&cfg)?;
            println!(
                "inverse loss {:.6e} -> {:.6e} over {} steps",
                h.initial(),
                h.last(),
                h.steps
            );
        }
        Command::Certify => {
            let r = pipeline::certify(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&r).expect("reports serialize")
            );
        }
        Command::Certificate { quantities } => {
            let c = pipeline::certificate(&cfg, quantities.as_deref())?;
            print!("{c}");
        }
        Command::Simulate => {
            let s = pipeline::simulate(&cfg)?;
            for r in &s.runs {
                println!(
                    "{}: envelope {:.6e} vs bound {:.6e}, {} diverged: {}",
                    r.label,
                    r.report.envelope,
                    r.bound,
                    r.report.diverged,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            if !s.pass {
                return Err(PipelineError::Validation(
                    "error envelope exceeds the certified bound".into(),
                ));
            }
        }
        Command::Report => {
            pipeline::report(&cfg)?;
            println!("report written to {}", cfg.paths().report().display());
        }
        Command::Run => {
            let r = pipeline::run_all(&cfg)?;
            if let Some(s) = &r.simulation {
                if !s.pass {
                    return Err(PipelineError::Validation(
                        "error envelope exceeds the certified bound".into(),
                    ));
                }
            }
            println!(
                "all stages complete; report at {}",
                cfg.paths().report().display()
            );
        }
        Command::Config => print!("{}", cfg.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
