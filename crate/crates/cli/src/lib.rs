//! Command line tools and the HTTP intervention service.

pub mod commands;
pub mod config;
pub mod service;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use commands::{CurvesArgs, EvalArgs, GenDataArgs, TrainCbmArgs, TrainPscbmArgs};
use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "pscbm", version, about = "Post-hoc stochastic concept bottleneck models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with correlated concepts.
    GenData(GenDataArgs),
    /// Train a concept bottleneck model.
    TrainCbm(TrainCbmArgs),
    /// Wrap a trained CBM with a covariance head and train the head.
    TrainPscbm(TrainPscbmArgs),
    /// Run the policy × strategy intervention sweep and write AUC tables.
    Eval(EvalArgs),
    /// Intervention curves for one policy and strategy.
    Curves(CurvesArgs),
    /// Serve intervention sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Model to serve as `ID=PATH`; repeat for several.
    #[arg(long = "model", value_name = "ID=PATH", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Monte Carlo samples per session update.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Base seed; session seeds derive from it per sample, as in `eval`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Loads the models and dataset named by `args`.
pub fn service_state(args: &ServeArgs) -> anyhow::Result<service::ServiceState> {
    let mut models = Vec::new();
    for spec in &args.models {
        let (id, path) = commands::parse_model_arg(spec);
        let id = id.ok_or_else(|| ConfigError::new("model", format!("expected ID=PATH, got {spec:?}")))?;
        models.push((id, commands::load_model(&path)?));
    }
    let data = commands::load_data(&args.data)?;
    service::ServiceState::new(models, data, args.samples, args.seed)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a).map(drop),
        Command::TrainCbm(a) => commands::train_cbm_cmd(&a).map(drop),
        Command::TrainPscbm(a) => commands::train_pscbm_cmd(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Curves(a) => commands::curves(&a).map(drop),
        Command::Serve(a) => {
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|e| ConfigError::new("host", format!("{e}")))?;
            let state = Arc::new(service_state(&a)?);
            tokio::runtime::Runtime::new()?.block_on(service::serve(state, addr))
        }
    }
}

/// 2 for configuration and compatibility errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(
                e.downcast_ref::<pscbm::Error>(),
                Some(
                    pscbm::Error::InvalidConfig { .. }
                        | pscbm::Error::InvalidCorrelation(_)
                        | pscbm::Error::IncompatibleStrategy(_)
                        | pscbm::Error::MissingPercentileTable
                )
            )
    });
    if config {
        2
    } else {
        1
    }
}
