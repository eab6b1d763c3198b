mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cocorrec", version, about = "Device-cloud collaborative correction for on-device sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter, split and sample a dataset (or generate a synthetic one).
    PrepareData(PrepareArgs),
    /// Train the device model, optionally with the correction network.
    Train(TrainArgs),
    /// Score a prepared split with a checkpoint or the popularity baseline.
    Evaluate(EvaluateArgs),
    /// Check the block kernel strategies against the scalar reference loop.
    BenchKernel(BenchKernelArgs),
    /// FLOPs and peak memory of the block against self-attention, as CSV.
    BenchResources(BenchResourcesArgs),
    /// Inference metrics and wall-clock per fast-weight mini-batch size, as CSV.
    SweepMinibatch(SweepArgs),
    /// Link delay for the hidden-state upload and correction download.
    SimulateDelay(DelayArgs),
    /// Serve corrections over TCP.
    ServeCloud(ServeArgs),
    /// Score test sequences on the device, fusing cloud corrections that arrive in time.
    RunDevice(DeviceArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Raw interaction file.
    #[arg(long, required_unless_present = "synthetic_users")]
    pub input: Option<PathBuf>,
    /// amazon_csv, yelp_json or canonical_tsv.
    #[arg(long, default_value = "canonical_tsv")]
    pub format: String,
    /// Generate this many synthetic users instead of reading a file.
    #[arg(long, conflicts_with = "input")]
    pub synthetic_users: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub synthetic_items: usize,
    #[arg(long, default_value_t = 2)]
    pub markov_order: usize,
    /// Drop users and items with at most this many interactions (10 for files, 0 for synthetic data).
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 4)]
    pub train_negatives: usize,
    #[arg(long, default_value_t = 100)]
    pub test_negatives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by prepare-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the checkpoint and records.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rates to try (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lr: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mini_batch: Option<usize>,
    #[arg(long)]
    pub gcn_hidden: Option<usize>,
    /// Train the device model alone.
    #[arg(long)]
    pub no_gcn: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "popularity")]
    pub checkpoint: Option<PathBuf>,
    /// Rank by training popularity instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub popularity: bool,
    /// Ignore the correction network stored in the checkpoint.
    #[arg(long)]
    pub no_gcn: bool,
    /// test or valid.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args)]
pub struct BenchKernelArgs {
    /// Any of naive, dual, minibatch.
    #[arg(long, value_delimiter = ',', default_value = "naive,dual")]
    pub strategies: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Mini-batch size of the minibatch strategy.
    #[arg(long, default_value_t = 4)]
    pub mini_batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Args)]
pub struct BenchResourcesArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 5)]
    pub mini_batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,25,50,100,200")]
    pub lengths: Vec<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DelayArgs {
    /// Link rate such as 5MBps or 15, or `all` for every preset.
    #[arg(long, default_value = "all")]
    pub bandwidth: String,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1.18)]
    pub compute_ms: f64,
    #[arg(long, default_value_t = 4.21)]
    pub tolerance_ms: f64,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
}

#[derive(Args)]
pub struct DeviceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Cloud address; without it the correction runs in process.
    #[arg(long, conflicts_with = "simulate_bandwidth")]
    pub cloud: Option<String>,
    /// Use the analytic link model at this rate (MB/s) instead of a real connection.
    #[arg(long)]
    pub simulate_bandwidth: Option<f64>,
    #[arg(long, default_value_t = 4.21)]
    pub tolerance_ms: f64,
    /// Score at most this many test sequences.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use cocorrec::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 3,
                Error::Data(_) => 4,
                Error::Protocol(_) => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData(a) => commands::prepare_data(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::BenchKernel(a) => commands::bench_kernel(a),
        Command::BenchResources(a) => commands::bench_resources(a),
        Command::SweepMinibatch(a) => commands::sweep_minibatch(a),
        Command::SimulateDelay(a) => commands::simulate_delay(a),
        Command::ServeCloud(a) => commands::serve_cloud(a),
        Command::RunDevice(a) => commands::run_device(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
