use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use echogen::model::Phase;
use echogen_cli::config::Config;
use echogen_cli::pipeline::{self, CliError, Run};

#[derive(Parser)]
#[command(
    name = "echogen",
    version,
    about = "Subject-driven multi-scale image generation"
)]
struct Cli {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory receiving checkpoints, metrics, samples and reports.
    #[arg(long, global = true, default_value = "runs")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to `data.root`.
    GenData,
    /// Train the autoencoder and calibrate the residual quantizer.
    TrainTokenizer,
    /// Train the generator.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Continue from this phase's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate images for one prompt.
    Sample {
        #[arg(long)]
        prompt: Option<String>,
        /// Reference PNG.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long = "gamma-t")]
        gamma_t: Option<f64>,
        #[arg(long = "gamma-i")]
        gamma_i: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_images: Option<usize>,
        /// Sampling temperature; 0 takes the sign of each logit.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score the held-out benchmark under each ablation, plus the guidance sweep if configured.
    Eval,
    /// Time next-scale generation against the token-by-token baseline.
    Bench {
        #[arg(long, default_value_t = 10)]
        requests: usize,
    },
    /// Run the built-in correctness checks.
    Selftest,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn sample_overrides(cmd: &Command) -> Vec<String> {
    let Command::Sample {
        prompt,
        reference,
        gamma_t,
        gamma_i,
        seed,
        num_images,
        temperature,
    } = cmd
    else {
        return Vec::new();
    };
    let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut out = Vec::new();
    if let Some(p) = prompt {
        out.push(format!("sample.prompt={}", quote(p)));
    }
    if let Some(r) = reference {
        out.push(format!(
            "sample.reference={}",
            quote(&r.display().to_string())
        ));
    }
    if let Some(v) = gamma_t {
        out.push(format!("sample.text={v:?}"));
    }
    if let Some(v) = gamma_i {
        out.push(format!("sample.image={v:?}"));
    }
    if let Some(v) = seed {
        out.push(format!("sample.seed={v}"));
    }
    if let Some(v) = num_images {
        out.push(format!("sample.num_images={v}"));
    }
    if let Some(v) = temperature {
        out.push(format!("sample.temperature={v:?}"));
    }
    out
}

fn init_threads() {
    if let Some(n) = std::env::var("ECHO_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("ECHO_THREADS={n} ignored: {e}");
        }
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(sample_overrides(&cli.command));
    let config = Config::resolve(cli.config.as_deref(), &overrides)?;
    let run = Run::new(config, &cli.workdir);
    let c = &run.config;
    log::info!(
        "config {} seeds: data {} tokenizer {} model {} train {} sample {} eval {}",
        run.config_hash,
        c.data.seed,
        c.tokenizer.seed,
        c.model.seed,
        c.train.seed,
        c.sample.seed,
        c.eval.seed
    );
    eprintln!("config hash {}", run.config_hash);
    match cli.command {
        Command::GenData => print_json(&pipeline::gen_data(&run)?),
        Command::TrainTokenizer => print_json(&pipeline::train_tokenizer(&run)?),
        Command::Train { phase, resume } => {
            let phase = match phase {
                PhaseArg::A => Phase::A,
                PhaseArg::B => Phase::B,
            };
            print_json(&pipeline::train(&run, phase, resume)?)
        }
        Command::Sample { .. } => {
            for p in pipeline::sample(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Eval => print_json(&pipeline::eval(&run)?.0),
        Command::Bench { requests } => print_json(&pipeline::bench(&run, requests)?),
        Command::Selftest => {
            let checks = pipeline::selftest(&run)?;
            for c in &checks {
                println!(
                    "{} {:<12} {:>8.2}s  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            pipeline::selftest_verdict(&checks)?;
        }
        Command::ShowConfig => print!("{}", run.config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
