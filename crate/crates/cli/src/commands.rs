use std::fs;
use std::io::{self, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use cocorrec::cochannel::{
    delay_report, encode_correction, encode_upload, serve_cloud as serve, write_delay_csv, Channel, ChannelConfig,
    CloudService, Device, DeviceStats, DelayRow, BANDWIDTH_PRESETS_MBPS,
};
use cocorrec::data::{
    ingest, preprocess, read_split_dir, sample_negatives, sequences, split_leave_last, synth_generate,
    write_split_dir, Format, IngestReport, SplitDataset, SplitManifest, SPLIT_FILE,
};
use cocorrec::eval::{resource_sweep, write_sweep_csv, MetricAccumulator, MetricReport};
use cocorrec::gcn::{CorrectionBundle, GcnConfig};
use cocorrec::numerics::Tensor;
use cocorrec::scn::{load_checkpoint, save_checkpoint};
use cocorrec::trainer::{self, minibatch_sweep, popularity_baseline, write_minibatch_csv, TrainConfig};
use cocorrec::ttt::{alg1_oracle, block_forward, BlockParams, TttConfig};
use cocorrec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{
    BenchKernelArgs, BenchResourcesArgs, DelayArgs, DeviceArgs, EvaluateArgs, PrepareArgs, ServeArgs, SweepArgs,
    TrainArgs,
};

const CHECKPOINT_FILE: &str = "checkpoint.ccrc";
const RUN_FILE: &str = "run.json";
const CONFIG_SNAPSHOT_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.json";
const RUN_MANIFEST_FILE: &str = "run_manifest.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_split(dir: &Path) -> Result<SplitDataset> {
    let (split, _) = read_split_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read prepared data in {}: {e}", dir.display())))?;
    Ok(split)
}

pub fn prepare_data(args: PrepareArgs) -> Result<()> {
    let (raw, report, default_min_count) = match (&args.input, args.synthetic_users) {
        (_, Some(users)) => {
            let log = synth_generate(users, args.synthetic_items, args.markov_order, args.seed)?;
            (log, IngestReport::default(), 0)
        }
        (Some(path), None) => {
            let format: Format = args.format.parse()?;
            let (log, report) = ingest(path, format).with_context(|| format!("ingesting {}", path.display()))?;
            (log, report, 10)
        }
        (None, None) => bail!(Error::Config("either --input or --synthetic-users is required".into())),
    };
    let min_count = args.min_count.unwrap_or(default_min_count);
    let (log, vocab) = preprocess(&raw, min_count)?;
    let seqs = sequences(&log, &vocab)?;
    let split = split_leave_last(&seqs, vocab.num_items(), args.seq_len);
    if split.test.is_empty() {
        bail!(Error::Data(format!(
            "no user has the {} interactions needed for sequence length {}",
            args.seq_len + 2,
            args.seq_len
        )));
    }
    let split = sample_negatives(split, args.train_negatives, args.test_negatives, args.seed)?;
    let manifest = SplitManifest::new(&log, &vocab, &split, min_count, report);
    write_split_dir(&args.out, &log, &split, &manifest)?;
    let digest = sha256_file(&args.out.join(SPLIT_FILE))?;
    #[derive(Serialize)]
    struct Prepared<'a> {
        manifest: &'a SplitManifest,
        split_sha256: String,
    }
    print_json(&Prepared {
        manifest: &manifest,
        split_sha256: digest,
    })
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &args.lr {
        cfg.learning_rates = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.dim {
        cfg.model_dim = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    if args.mini_batch.is_some() {
        cfg.mini_batch = args.mini_batch;
    }
    if let Some(v) = args.gcn_hidden {
        cfg.gcn_hidden = v;
    }
    if args.no_gcn {
        cfg.use_gcn = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest {
    version: &'static str,
    seed: u64,
    config_hash: String,
    data_sha256: String,
    checkpoint_sha256: String,
    learning_rate: f64,
    best_epoch: usize,
    test: MetricReport,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let split = load_split(&args.data)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(CONFIG_SNAPSHOT_FILE), toml::to_string(&cfg)?)?;
    let outcome = trainer::train(&split, &cfg)?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &outcome.scn, outcome.gcn.as_ref())?;
    let test = trainer::evaluate(&outcome.scn, outcome.gcn.as_ref(), &split.test)?;
    fs::write(args.out.join(RUN_FILE), serde_json::to_string_pretty(&outcome.record)?)?;
    fs::write(args.out.join(METRICS_FILE), serde_json::to_string_pretty(&test)?)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: outcome.record.config_hash.clone(),
        data_sha256: sha256_file(&args.data.join(SPLIT_FILE))?,
        checkpoint_sha256: sha256_file(&checkpoint)?,
        learning_rate: outcome.record.learning_rate,
        best_epoch: outcome.record.best_epoch,
        test,
    };
    fs::write(args.out.join(RUN_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    print_json(&manifest)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let split = load_split(&args.data)?;
    let examples = match args.split.as_str() {
        "test" => &split.test,
        "valid" => &split.valid,
        other => bail!(Error::Config(format!("unknown split `{other}` (expected test or valid)"))),
    };
    let report = if args.popularity {
        if args.split != "test" {
            bail!(Error::Config("the popularity baseline is scored on the test split".into()));
        }
        popularity_baseline(&split)?
    } else {
        let path = args.checkpoint.as_deref().ok_or_else(|| anyhow!("--checkpoint is required"))?;
        let (scn, gcn) = load_checkpoint(path)?;
        check_compatible(&scn.config.seq_len, &scn.config.vocab_size, &split)?;
        let gcn = if args.no_gcn { None } else { gcn };
        trainer::evaluate(&scn, gcn.as_ref(), examples)?
    };
    print_json(&report)
}

fn check_compatible(seq_len: &usize, vocab_size: &usize, split: &SplitDataset) -> Result<()> {
    if *seq_len != split.seq_len || *vocab_size != split.num_items {
        bail!(Error::Config(format!(
            "checkpoint expects sequence length {seq_len} and {vocab_size} item ids, data has {} and {}",
            split.seq_len, split.num_items
        )));
    }
    Ok(())
}

/// `max|a - b| / max|b|`.
fn norm_rel_err(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - y).abs())
        .fold(0.0, f64::max);
    let scale = b.data().iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Serialize)]
struct KernelBench {
    strategy: String,
    mini_batch: usize,
    seeds: u64,
    max_rel_error: f64,
    tolerance: f64,
    pass: bool,
}

pub fn bench_kernel(args: BenchKernelArgs) -> Result<()> {
    if args.n == 0 || args.heads == 0 || !args.dim.is_multiple_of(2 * args.heads) {
        bail!(Error::Config("need n >= 1 and a dimension divisible by twice the head count".into()));
    }
    let mut rows = Vec::new();
    for strategy in &args.strategies {
        let b = match strategy.as_str() {
            "naive" => 1,
            "dual" => args.n,
            "minibatch" => args.mini_batch.clamp(1, args.n),
            other => bail!(Error::Config(format!(
                "unknown strategy `{other}` (expected naive, dual or minibatch)"
            ))),
        };
        let cfg = TttConfig::new(args.dim, args.heads, b);
        let mut worst = 0.0f64;
        for seed in 0..args.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = BlockParams::init(&cfg, &mut rng)?;
            let scale = 0.3f32;
            for w in &mut params.state0.w {
                w.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
            }
            let h = Tensor::from_fn(args.n, args.dim, |_, _| rng.random_range(-1.0f32..1.0));
            let (_, trace) = block_forward(&h, &params, &cfg, None)?;
            let oracle = alg1_oracle(&h.cast::<f64>(), &params.cast::<f64>(), &cfg)?;
            worst = worst.max(norm_rel_err(&trace.z, &oracle));
        }
        rows.push(KernelBench {
            strategy: strategy.clone(),
            mini_batch: b,
            seeds: args.seeds,
            max_rel_error: worst,
            tolerance: args.tolerance,
            pass: worst <= args.tolerance,
        });
    }
    print_json(&rows)?;
    if rows.iter().any(|r| !r.pass) {
        bail!("kernel output exceeds the tolerance against the reference loop");
    }
    Ok(())
}

fn csv_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn bench_resources(args: BenchResourcesArgs) -> Result<()> {
    let cfg = TttConfig::new(args.dim, args.heads, args.mini_batch);
    let max_len = args.lengths.iter().copied().max().unwrap_or(1);
    cfg.validate(max_len.max(args.mini_batch))?;
    let rows = resource_sweep(&cfg, &args.lengths);
    write_sweep_csv(&rows, csv_sink(args.out.as_deref())?)?;
    Ok(())
}

pub fn sweep_minibatch(args: SweepArgs) -> Result<()> {
    let split = load_split(&args.data)?;
    let (scn, _) = load_checkpoint(&args.checkpoint)?;
    check_compatible(&scn.config.seq_len, &scn.config.vocab_size, &split)?;
    let rows = minibatch_sweep(&scn, &split.test, &args.sizes, args.repeats)?;
    write_minibatch_csv(&rows, csv_sink(args.out.as_deref())?)?;
    Ok(())
}

fn parse_bandwidth(s: &str) -> Result<Vec<f64>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(BANDWIDTH_PRESETS_MBPS.to_vec());
    }
    let number = s.trim().trim_end_matches("MBps").trim_end_matches("MB/s").trim();
    match number.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(vec![v]),
        _ => bail!(Error::Config(format!("invalid bandwidth `{s}` (expected e.g. 5MBps or all)"))),
    }
}

pub fn simulate_delay(args: DelayArgs) -> Result<()> {
    if args.n == 0 || args.heads == 0 || !args.dim.is_multiple_of(args.heads) {
        bail!(Error::Config("need n >= 1 and a dimension divisible by the head count".into()));
    }
    let gcn = GcnConfig {
        seq_len: args.n,
        model_dim: args.dim,
        heads: args.heads,
        hidden: 0,
    };
    let upload = encode_upload(&Tensor::zeros(&[args.n, args.dim]), args.heads)?.len();
    let download = encode_correction(&CorrectionBundle::neutral(&gcn))?.len();
    let mut rows = Vec::new();
    for mbps in parse_bandwidth(&args.bandwidth)? {
        let mut cfg = ChannelConfig::with_bandwidth_mbps(mbps);
        cfg.cloud_compute_ms = args.compute_ms;
        cfg.tolerance_ms = args.tolerance_ms;
        cfg.validate()?;
        rows.push(DelayRow {
            bandwidth_mbps: mbps,
            upload_bytes: upload,
            download_bytes: download,
            report: delay_report(upload, download, &cfg, 0),
        });
    }
    match args.format.as_str() {
        "csv" => write_delay_csv(&rows, io::stdout().lock())?,
        "json" => print_json(&rows)?,
        other => bail!(Error::Config(format!("unknown format `{other}` (expected csv or json)"))),
    }
    Ok(())
}

pub fn serve_cloud(args: ServeArgs) -> Result<()> {
    let (_, gcn) = load_checkpoint(&args.checkpoint)?;
    let gcn = gcn.ok_or_else(|| Error::Config("checkpoint has no correction network".into()))?;
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    log::info!("serving corrections on {}", listener.local_addr()?);
    eprintln!("listening on {}", listener.local_addr()?);
    serve(listener, Arc::new(CloudService::new(gcn)), Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

#[derive(Serialize)]
struct DeviceSummary {
    channel: String,
    requests: u64,
    corrected: u64,
    timeouts: u64,
    failures: u64,
    fallbacks: u64,
    mean_reported_delay_ms: Option<f64>,
    metrics: MetricReport,
}

pub fn run_device(args: DeviceArgs) -> Result<()> {
    let split = load_split(&args.data)?;
    let (scn, gcn) = load_checkpoint(&args.checkpoint)?;
    check_compatible(&scn.config.seq_len, &scn.config.vocab_size, &split)?;
    let gcn = gcn.ok_or_else(|| Error::Config("checkpoint has no correction network".into()))?;
    let fusion = gcn.fusion_scalars();
    let (channel, label) = match (&args.cloud, args.simulate_bandwidth) {
        (Some(addr), _) => {
            let addr = addr
                .to_socket_addrs()
                .with_context(|| format!("resolving {addr}"))?
                .next()
                .ok_or_else(|| Error::Config(format!("no address for {addr}")))?;
            let connect_timeout = Duration::from_secs_f64((args.tolerance_ms / 1e3).max(1e-3));
            (Channel::Tcp { addr, connect_timeout }, format!("tcp://{addr}"))
        }
        (None, Some(mbps)) => {
            let mut config = ChannelConfig::with_bandwidth_mbps(mbps);
            config.tolerance_ms = args.tolerance_ms;
            config.validate()?;
            let service = Arc::new(CloudService::new(gcn));
            (Channel::Simulated { service, config }, format!("simulated {mbps} MB/s"))
        }
        (None, None) => (Channel::InProcess(Arc::new(CloudService::new(gcn))), "in-process".to_owned()),
    };
    let mut device = Device::new(scn, fusion, channel, args.tolerance_ms);
    let mut acc = MetricAccumulator::new();
    let (mut delay_sum, mut delay_count) = (0.0, 0u64);
    let limit = args.limit.unwrap_or(usize::MAX);
    for ex in split.test.iter().take(limit) {
        let rec = device.recommend(&ex.input, &ex.candidates)?;
        if let Some(d) = &rec.delay {
            delay_sum += d.total_ms;
            delay_count += 1;
        }
        acc.push(&rec.scores, &ex.candidates);
    }
    let DeviceStats {
        requests,
        corrected,
        timeouts,
        failures,
    } = device.stats().clone();
    print_json(&DeviceSummary {
        channel: label,
        requests,
        corrected,
        timeouts,
        failures,
        fallbacks: timeouts + failures,
        mean_reported_delay_ms: (delay_count > 0).then(|| delay_sum / delay_count as f64),
        metrics: acc.report(),
    })
}
