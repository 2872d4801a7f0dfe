use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use raad_cli::commands::{self, CliError};
use raad_cli::config::{AdjustmentOverrides, FlagOverrides, ServiceConfig, TOKEN_ENV};
use raad_cli::server;
use raad_core::ScoreKind;

/// False-positive suppression for anomaly detectors.
#[derive(Parser)]
#[command(name = "raad", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Annotation store snapshot file.
    #[arg(long, global = true, value_name = "PATH")]
    store: Option<PathBuf>,
    /// Address for `serve`.
    #[arg(long, global = true, value_name = "ADDR")]
    listen: Option<SocketAddr>,
    /// Similarity threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Curve sharpness.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Euclidean distance threshold.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Alert threshold on adjusted scores.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true, value_parser = ["probability", "loss"])]
    score_kind: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    /// Score an NDJSON batch and print the result as JSON.
    Process {
        /// NDJSON file, or `-` for standard input.
        #[arg(default_value = "-")]
        input: PathBuf,
    },
    /// Mark an event from an NDJSON file as a false positive.
    Annotate {
        /// NDJSON file holding the event, or `-` for standard input.
        #[arg(long, default_value = "-")]
        events: PathBuf,
        #[arg(long)]
        event_id: String,
        #[arg(long, default_value = "cli")]
        annotator: String,
        #[arg(long)]
        note: Option<String>,
    },
    /// Report class separability of labeled embeddings.
    Diagnose {
        /// NDJSON lines of `{"embedding": [...], "label": "..."}`.
        input: PathBuf,
        /// NDJSON lines of `{"truth", "score_original", "score_adjusted"}`.
        #[arg(long)]
        evaluate: Option<PathBuf>,
        #[arg(long)]
        anchors: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the synthetic feedback-loop benchmark.
    Bench {
        /// JSON synthetic spec; the ZDT-shaped preset when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed for the preset.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write the per-round CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

impl Cli {
    fn flags(&self) -> Result<FlagOverrides, CliError> {
        let score_kind = self
            .score_kind
            .as_deref()
            .map(str::parse::<ScoreKind>)
            .transpose()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(FlagOverrides {
            listen: self.listen,
            store: self.store.clone(),
            adjustment: AdjustmentOverrides {
                tau: self.tau,
                alpha: self.alpha,
                delta: self.delta,
                score_kind,
                alert_threshold: self.threshold,
            },
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ServiceConfig::resolve(cli.config.as_deref(), &cli.flags()?, std::env::var(TOKEN_ENV).ok()).map_err(
        |e| match e {
            raad_cli::config::ConfigError::Io(..) => CliError::Io(e.to_string()),
            raad_cli::config::ConfigError::Invalid(_) => CliError::Validation(e.to_string()),
        },
    )?;
    match cli.command {
        Command::Serve => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            runtime
                .block_on(server::serve(&cfg))
                .map_err(|e| CliError::Io(e.to_string()))
        }
        Command::Process { input } => {
            let body = commands::read_input(&input)?;
            println!("{}", commands::process(&body, &cfg)?);
            Ok(())
        }
        Command::Annotate {
            events,
            event_id,
            annotator,
            note,
        } => {
            let body = commands::read_input(&events)?;
            println!("{}", commands::annotate(&body, &event_id, &annotator, note, &cfg)?);
            Ok(())
        }
        Command::Diagnose {
            input,
            evaluate,
            anchors,
            seed,
        } => {
            let labeled = commands::read_input(&input)?;
            let evaluation = evaluate.as_deref().map(commands::read_input).transpose()?;
            let report = commands::diagnose(&labeled, evaluation.as_deref(), anchors, seed, &cfg)?;
            println!("{report}");
            Ok(())
        }
        Command::Bench { spec, seed, json, csv } => {
            let spec = spec.as_deref().map(commands::read_input).transpose()?;
            let report = commands::bench(spec.as_deref(), seed, &cfg)?;
            if let Some(path) = &csv {
                commands::write_output(path, &report.to_csv())?;
            }
            match &json {
                Some(path) => commands::write_output(path, &report.to_json())?,
                None => println!("{}", report.to_json()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
