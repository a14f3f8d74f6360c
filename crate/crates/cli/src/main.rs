//! `erft`: simulate data, pretrain a backbone, adapt it per image, evaluate and benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use erft::backbone::Backbone;
use erft::config::{RunConfig, WORKERS_ENV};
use erft::dataset::{load_dataset, simulate, training_samples, write_dataset, SimulationSpec};
use erft::degrade::SensorShift;
use erft::error::{ErftError, Result};
use erft::metrics::{self, METRICS_HEADER};
use erft::patch::{bench, bench_csv, run_erft, BenchArch, Phase};
use erft::raster::{read_raster, validate_pair, write_raster};
use erft::weights::{read_weights, write_weights};

#[derive(Parser, Debug)]
#[command(name = "erft", version, about = "Test-time feature tailoring for pansharpening")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set epochs=5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic reduced-resolution dataset
    Simulate(SimulateArgs),
    /// Pretrain the backbone on the training split of a dataset
    Pretrain(PretrainArgs),
    /// Fuse one PAN/LRMS pair, adapting the feature tailor first
    Adapt(AdaptArgs),
    /// Compute quality metrics for a fused image
    Eval(EvalArgs),
    /// Time full-image versus patch-wise processing
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Defaults to the configured seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Training scenes; the rest are test scenes (default: half)
    #[arg(long)]
    train: Option<usize>,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    /// PAN side length
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Sensor shift `gain,offset,gamma` applied to the MS side of test scenes
    #[arg(long, value_name = "G,O,GAMMA")]
    shift: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV (default: <out>.curve.csv)
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long, num_args = 2, value_names = ["PAN", "LRMS"])]
    pair: Vec<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Fused HRMS raster; the tailor, log and timings are written next to it
    #[arg(long)]
    out: PathBuf,
    /// Skip adaptation and run the frozen backbone
    #[arg(long)]
    no_ft: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    fused: PathBuf,
    #[arg(long, num_args = 2, value_names = ["PAN", "LRMS"])]
    pair: Vec<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Row label (default: file stem of --fused)
    #[arg(long)]
    id: Option<String>,
    /// Also write the CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "cnn")]
    arch: String,
    /// Comma-separated square image sizes
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value = "train")]
    phase: String,
    /// Patch side (default: configured patch)
    #[arg(long)]
    patch: Option<usize>,
    /// Training patches (default: configured train_patches)
    #[arg(long)]
    m: Option<usize>,
    /// Concurrent patches (default: configured batch)
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.apply_env_workers(std::env::var(WORKERS_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn init_pool(cfg: &RunConfig) -> Result<()> {
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ErftError::Config(format!("cannot start {n} workers: {e}")))?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_shift(text: &str, bands: usize) -> Result<SensorShift> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| ErftError::Config(format!("--shift: bad number {p:?}"))))
        .collect::<Result<_>>()?;
    let [g, o, gamma] = parts[..] else {
        return Err(ErftError::Config(format!("--shift expects gain,offset,gamma, got {text:?}")));
    };
    SensorShift::uniform(bands, g, o, gamma)
}

fn cmd_simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        return Err(ErftError::Config(format!("{} is not empty (use --force)", a.out.display())));
    }
    let train = a.train.unwrap_or(a.scenes / 2);
    if train > a.scenes {
        return Err(ErftError::Config(format!("--train {train} exceeds --scenes {}", a.scenes)));
    }
    let test_shift = match &a.shift {
        Some(s) => parse_shift(s, a.bands)?,
        None => SensorShift::identity(a.bands),
    };
    let spec = SimulationSpec {
        seed: a.seed.unwrap_or(cfg.seed),
        train,
        test: a.scenes - train,
        bands: a.bands,
        size: a.size,
        mtf: cfg.sensor_mtf(a.bands)?,
        test_shift,
    };
    let scenes = simulate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let m = write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes ({train} train) to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, a: &PretrainArgs) -> Result<()> {
    let (manifest, scenes) = load_dataset(&a.data)?;
    if manifest.ratio != cfg.ratio {
        return Err(ErftError::Config(format!("dataset ratio {} differs from configured ratio {}", manifest.ratio, cfg.ratio)));
    }
    let samples = training_samples(&scenes, cfg.pretrain_crop)?;
    let mut net = cfg.init_backbone(manifest.bands)?;
    let report = net.pretrain(&samples, &cfg.pretrain_config())?;
    write_weights(&net.to_archive()?, &a.out)?;
    let mut curve = String::from("epoch,l1\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(a.curve.clone().unwrap_or_else(|| with_suffix(&a.out, ".curve.csv")), curve)?;
    match report.epoch_losses.last() {
        Some(l) => println!("final train L1 {l:.6} after {} epochs on {} crops", report.epoch_losses.len(), samples.len()),
        None => println!("no epochs run; wrote initial weights"),
    }
    Ok(())
}

fn cmd_adapt(cfg: &RunConfig, a: &AdaptArgs) -> Result<()> {
    let pair = validate_pair(read_raster(&a.pair[0])?, read_raster(&a.pair[1])?, cfg.ratio)?;
    let mut net = Backbone::from_archive(&read_weights(&a.weights)?, cfg.ratio)?;
    net.freeze();
    let out = run_erft(&pair, &net, &cfg.adapt_config()?, &cfg.sensor_mtf(pair.bands())?, a.no_ft)?;
    write_raster(&out.fused, &a.out)?;
    write_weights(&out.tailor.to_archive()?, with_suffix(&a.out, ".tailor.erfw"))?;
    fs::write(with_suffix(&a.out, ".log.csv"), out.log.to_csv())?;
    let line = out.timings.line();
    fs::write(with_suffix(&a.out, ".timing.txt"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let pair = validate_pair(read_raster(&a.pair[0])?, read_raster(&a.pair[1])?, cfg.ratio)?;
    let fused = read_raster(&a.fused)?;
    let gt = a.gt.as_ref().map(read_raster).transpose()?;
    let report = metrics::evaluate(&fused, &pair, gt.as_ref(), &cfg.sensor_mtf(pair.bands())?, cfg.metric_window())?;
    let id = a.id.clone().unwrap_or_else(|| a.fused.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let csv = format!("{METRICS_HEADER}\n{}\n", report.csv_row(&id));
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let arch: BenchArch = a.arch.parse()?;
    let phase: Phase = a.phase.parse()?;
    let patch = a.patch.unwrap_or(cfg.patch);
    let m = a.m.unwrap_or(cfg.train_patches);
    let b = a.batch.unwrap_or(cfg.batch);
    let rows = a.sizes.iter().map(|&s| bench(arch, phase, s, patch, m, b, a.reps)).collect::<Result<Vec<_>>>()?;
    let csv = bench_csv(&rows);
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(ErftError::Config("no command given (see --help)".into()));
    };
    init_pool(&cfg)?;
    let start = Instant::now();
    match command {
        Command::Simulate(a) => cmd_simulate(&cfg, a)?,
        Command::Pretrain(a) => cmd_pretrain(&cfg, a)?,
        Command::Adapt(a) => cmd_adapt(&cfg, a)?,
        Command::Eval(a) => cmd_eval(&cfg, a)?,
        Command::Bench(a) => cmd_bench(&cfg, a)?,
    }
    eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("erft: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
