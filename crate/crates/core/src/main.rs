use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use csiq::alloc::{allocate_budget, AllocConfig};
use csiq::channel::{load_dataset, save_dataset, ChannelDataset, GenParams, Split, TruncatedChannel};
use csiq::eval::{compare, evaluate_run, reports_csv, reports_json, write_timing, Timing};
use csiq::metrics::output_stats;
use csiq::quantizer::{Bitstream, KMeansConfig};
use csiq::train::{load_run, save_run, train, Method, TrainConfig, TrainData};
use csiq::{Error, Result};

#[derive(Parser)]
#[command(name = "csiq", version, about = "Learned CSI feedback compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test channel datasets into a directory.
    GenerateData(GenerateArgs),
    /// Train one method and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run on the test split.
    Evaluate(EvalArgs),
    /// Allocate a bit budget over a run's encoder outputs.
    Allocate(AllocateArgs),
    /// Per-output dynamic-range statistics of a run's encoder.
    Stats(StatsArgs),
    /// Comparison table of several runs on the same test split.
    Compare(CompareArgs),
    /// Encode channels to feedback bitstreams and reconstruct them.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; receives train.bin, val.bin and test.bin.
    #[arg(long)]
    out: PathBuf,
    /// Path-count range `lo-hi`, or a single count.
    #[arg(long, default_value = "3-6")]
    paths: String,
    /// Training samples.
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 500)]
    val_samples: usize,
    #[arg(long, default_value_t = 500)]
    test_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transmit antennas.
    #[arg(long, default_value_t = 8)]
    nt: usize,
    /// Subcarriers before truncation.
    #[arg(long, default_value_t = 64)]
    nc_full: usize,
    /// Delay rows kept after truncation.
    #[arg(long, default_value_t = 8)]
    nc_trunc: usize,
    /// Spread, in angle bins, of the per-channel mean direction; 0 for uniform.
    #[arg(long)]
    sector_std: Option<f64>,
    /// Per-path angle offset bound around the mean direction, in bins.
    #[arg(long)]
    angle_spread: Option<usize>,
    /// Number of integer delay taps paths are drawn from.
    #[arg(long)]
    delay_spread: Option<usize>,
    /// Power-delay profile decay constant, in taps.
    #[arg(long)]
    delay_decay: Option<f64>,
    /// Off-grid offset bound, in bins.
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method tag; overrides the config.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from `generate-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Writes the report as JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Total bits; defaults to M times the run's B.
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long)]
    b_min: Option<u32>,
    #[arg(long)]
    b_max: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Allocation file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Moving-average window of the smoothed curve.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output prefix; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Run directories.
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset file whose channels are encoded.
    #[arg(long)]
    input: PathBuf,
    /// Decode this feedback file instead of encoding `--input`.
    #[arg(long)]
    feedback: Option<PathBuf>,
    /// Output directory; receives feedback.bin and reconstruction.bin.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Infer(a) => infer_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_paths(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad path range {s:?}"));
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (paths_min, paths_max) = parse_paths(&a.paths)?;
    let desk = GenParams::desk();
    let params = GenParams {
        paths_min,
        paths_max,
        n_t: a.nt,
        nc_full: a.nc_full,
        delay_spread: a.delay_spread.unwrap_or(desk.delay_spread),
        delay_decay: a.delay_decay.unwrap_or(desk.delay_decay),
        angle_spread: a.angle_spread.unwrap_or(desk.angle_spread),
        jitter: a.jitter.unwrap_or(desk.jitter),
        sector_std: a.sector_std.unwrap_or(desk.sector_std),
    };
    fs::create_dir_all(&a.out)?;
    for (split, count) in [
        (Split::Train, a.samples),
        (Split::Val, a.val_samples),
        (Split::Test, a.test_samples),
    ] {
        let d = ChannelDataset::generate(&params, a.nc_trunc, split, count, a.seed)?;
        let path = a.out.join(format!("{}.bin", split.name()));
        save_dataset(&d, &path)?;
        println!("{}: {count} samples", path.display());
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<ChannelDataset> {
    load_dataset(dir.join(format!("{}.bin", split.name())))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = TrainData::new(
        load_split(&a.data, Split::Train)?.real_vectors(),
        load_split(&a.data, Split::Val)?.real_vectors(),
    )?;
    let start = Instant::now();
    let sys = train(&cfg, &data)?;
    let secs = start.elapsed().as_secs_f64();
    save_run(&sys, &a.out)?;
    write_timing(&a.out, &Timing { train_seconds: secs })?;
    let val = sys.nmse_db(&data.val)?;
    println!(
        "{}: best epoch {}, validation NMSE {val:.2} dB, {secs:.1} s",
        sys.method, sys.best_epoch
    );
    Ok(())
}

fn evaluate_cmd(a: EvalArgs) -> Result<()> {
    let test = load_split(&a.data, Split::Test)?.real_vectors();
    let report = evaluate_run(&a.run, &test)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(out) = &a.out {
        fs::write(out, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn allocate_cmd(a: AllocateArgs) -> Result<()> {
    let sys = load_run(&a.run)?;
    let cfg = &sys.config;
    let train = load_split(&a.data, Split::Train)?.real_vectors();
    let m = sys.autoencoder.latent_dim();
    let take = cfg.alloc_samples.min(train.len());
    let mut sets = vec![Vec::with_capacity(take); m];
    for h in &train[..take] {
        for (s, v) in sets.iter_mut().zip(sys.autoencoder.encode(h)?) {
            s.push(v);
        }
    }
    let budget = a.budget.unwrap_or(m as u32 * cfg.bits);
    let alloc_cfg = AllocConfig {
        max_iters: 10 * m,
        tol: 1e-9,
        kmeans: KMeansConfig {
            max_iters: cfg.kmeans_iters,
            tol: 1e-10,
            batch: cfg.alloc_samples,
        },
        seed: a.seed.unwrap_or(cfg.seed),
    };
    let outcome = allocate_budget(
        &sets,
        budget,
        a.b_min.unwrap_or(cfg.b_min),
        a.b_max.unwrap_or(cfg.b_max),
        &alloc_cfg,
    )?;
    outcome.allocation.save(&a.out)?;
    for (i, l) in outcome.loss_history.iter().enumerate() {
        println!("step {i}: total quantization loss {l:e}");
    }
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let sys = load_run(&a.run)?;
    let test = load_split(&a.data, Split::Test)?.real_vectors();
    let stats = output_stats(&sys.latents(&test)?)?;
    fs::write(&a.out, stats.to_csv(a.window))?;
    println!("max/min normalized std: {:.3}", stats.spread());
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let test = load_split(&a.data, Split::Test)?.real_vectors();
    let reports = compare(&a.runs, &test)?;
    let csv = reports_csv(&reports);
    fs::write(a.out.with_extension("csv"), &csv)?;
    fs::write(a.out.with_extension("json"), reports_json(&reports))?;
    print!("{csv}");
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let sys = load_run(&a.run)?;
    let input = load_dataset(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let streams = match &a.feedback {
        Some(path) => {
            let buf = fs::read(path)?;
            let mut rest = &buf[..];
            let mut streams = Vec::new();
            while !rest.is_empty() {
                let (x, used) = Bitstream::from_wire(rest)?;
                streams.push(x);
                rest = &rest[used..];
            }
            streams
        }
        None => {
            let streams = input
                .real_vectors()
                .iter()
                .map(|h| sys.feedback(h))
                .collect::<Result<Vec<_>>>()?;
            let mut wire = Vec::new();
            for x in &streams {
                wire.extend(x.to_wire()?);
            }
            fs::write(a.out.join("feedback.bin"), wire)?;
            streams
        }
    };
    let (n_c, n_t) = (input.n_c, input.n_t());
    let samples = streams
        .iter()
        .map(|x| TruncatedChannel::from_real_vec(n_c, n_t, &sys.reconstruct_from(x)?))
        .collect::<Result<Vec<_>>>()?;
    let recon = ChannelDataset { samples, ..input };
    save_dataset(&recon, a.out.join("reconstruction.bin"))?;
    let bits = streams.first().map_or(0, |x| x.len_bits);
    println!("{} channels, {bits} bits each", streams.len());
    Ok(())
}
