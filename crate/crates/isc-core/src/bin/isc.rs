//! Command-line front end: detect loop closures over a scan directory,
//! rescore a stored detection log, time retrieval, render a descriptor as
//! an image, or generate the synthetic benchmark sequence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use isc_core::descriptor::Isc;
use isc_core::engine::{Detection, Engine, EngineConfig};
use isc_core::eval::{
    bench_query, evaluate, export_trajectory_overlay, read_detection_log, EvalParams, GroundTruth,
    LatencyStats,
};
use isc_core::ingest::load_scan;
use isc_core::synth::{generate, SynthParams};

#[derive(Parser, Debug)]
#[command(name = "isc", version, about = "Loop closure detection for 3D LiDAR scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect loop closures over a directory of scans and score the run.
    Run(RunArgs),
    /// Rescore a stored detection log against a trajectory.
    Eval(EvalArgs),
    /// Time retrieval against a generated database.
    Bench(BenchArgs),
    /// Render one scan's descriptor as a grayscale PGM image.
    DumpIsc(DumpIscArgs),
    /// Generate the synthetic benchmark sequence.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory of scans (`.bin` packed binary or ASCII `.txt`/`.xyz`),
    /// processed in name order; names are the frame ids.
    #[arg(long)]
    scans: PathBuf,
    /// Ground-truth trajectory: 12-number pose rows or `frame x y z` lines.
    /// Without it the run still writes the detection log, but no scores.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Configuration file of `key = value` lines; defaults fill whatever it
    /// leaves out. Omit to run entirely on defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory: detections.jsonl, config.txt, and with ground
    /// truth also report.json and overlay.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also save the final descriptor database to this path.
    #[arg(long)]
    save_db: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Detection log from a previous run (one JSON record per line).
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth trajectory the log is scored against.
    #[arg(long)]
    gt: PathBuf,
    /// Distance under which a detected pair counts as a true loop, meters.
    #[arg(long, default_value_t = 4.0)]
    loop_dist: f64,
    /// Frames adjacent to the query that never count as loops.
    #[arg(long, default_value_t = 50)]
    exclusion_window: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Database size to search.
    #[arg(long, default_value_t = 4_000)]
    db_size: usize,
    /// Queries to time.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Generator seed for the database and queries.
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DumpIscArgs {
    /// Scan file to describe.
    #[arg(long)]
    scan: PathBuf,
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory to create (scans/, gt.txt, manifest.json).
    #[arg(long)]
    out: PathBuf,
    /// World and trajectory seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Bench(args) => bench(args),
        Command::DumpIsc(args) => dump_isc(args),
        Command::Synth(args) => synth(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(path) => EngineConfig::from_key_value_file(path)
            .with_context(|| format!("reading configuration from {}", path.display())),
        None => Ok(EngineConfig::default()),
    }
}

/// Scan files under `dir` in name order. Names must sort like the frame
/// order; zero-padded numeric names do.
fn scan_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing scans in {}", dir.display()))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "bin" | "txt" | "xyz" | "asc"))
    });
    paths.sort();
    if paths.is_empty() {
        bail!("no scan files found in {}", dir.display());
    }
    Ok(paths)
}

fn write_detection_log(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for d in detections {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let paths = scan_paths(&args.scans)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let ingest = config.ingest()?;
    let mut engine = Engine::new(config)?;
    let mut detections: Vec<Detection> = Vec::new();
    let mut latencies_us: Vec<f64> = Vec::with_capacity(paths.len());
    let started = Instant::now();
    for (i, path) in paths.iter().enumerate() {
        let cloud =
            load_scan(path, &ingest).with_context(|| format!("loading {}", path.display()))?;
        let t0 = Instant::now();
        detections.extend(engine.process_cloud(cloud));
        latencies_us.push(t0.elapsed().as_secs_f64() * 1e6);
        if (i + 1) % 1_000 == 0 {
            eprintln!("processed {}/{} scans", i + 1, paths.len());
        }
    }
    detections.extend(engine.finish());
    let accepted = detections.iter().filter(|d| d.accepted).count();
    eprintln!(
        "processed {} scans in {:.1?}: {} detections accepted, {} rejected",
        paths.len(),
        started.elapsed(),
        accepted,
        detections.len() - accepted
    );

    write_detection_log(&args.out.join("detections.jsonl"), &detections)?;
    fs::write(args.out.join("config.txt"), engine.config().to_key_values())?;

    if let Some(gt_path) = &args.gt {
        let gt = GroundTruth::from_file(gt_path)
            .with_context(|| format!("reading ground truth from {}", gt_path.display()))?;
        let params = EvalParams {
            loop_dist: engine.config().loop_dist,
            exclusion_window: engine.config().exclusion_window,
        };
        let mut report = evaluate(&detections, &gt, &params)?;
        report.latency_stats = Some(LatencyStats::from_samples_us(latencies_us));
        report.db_size_final = Some(engine.len());

        let rendered = serde_json::to_string_pretty(&report)?;
        fs::write(args.out.join("report.json"), format!("{rendered}\n"))?;
        let mut overlay = BufWriter::new(File::create(args.out.join("overlay.csv"))?);
        export_trajectory_overlay(&mut overlay, &gt, &detections)?;
        overlay.flush()?;
        println!("{rendered}");
    } else {
        eprintln!("no ground truth given; wrote the detection log only");
    }

    if let Some(db_path) = &args.save_db {
        engine.database().save_path(db_path)?;
        eprintln!("saved {} descriptors to {}", engine.len(), db_path.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let detections = read_detection_log(&args.detections)
        .with_context(|| format!("reading {}", args.detections.display()))?;
    let gt = GroundTruth::from_file(&args.gt)
        .with_context(|| format!("reading ground truth from {}", args.gt.display()))?;
    let params = EvalParams {
        loop_dist: args.loop_dist,
        exclusion_window: args.exclusion_window,
    };
    let report = evaluate(&detections, &gt, &params)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if args.db_size == 0 || args.trials == 0 {
        bail!("--db-size and --trials must be positive");
    }
    let stats = bench_query(args.db_size, args.trials, args.seed);
    println!(
        "full retrieval:  mean {:9.1} us   p50 {:9.1} us   p99 {:9.1} us",
        stats.full.mean_us, stats.full.p50_us, stats.full.p99_us
    );
    println!(
        "rotation stage:  mean {:9.1} us   p50 {:9.1} us   p99 {:9.1} us",
        stats.binary.mean_us, stats.binary.p50_us, stats.binary.p99_us
    );
    println!("({} queries against {} entries)", stats.trials, stats.db_size);
    Ok(())
}

fn dump_isc(args: DumpIscArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let ingest = config.ingest()?;
    let cloud = load_scan(&args.scan, &ingest)
        .with_context(|| format!("loading {}", args.scan.display()))?;
    let isc = Isc::from_cloud(&cloud, &config.grid());
    let mut w = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    isc.write_pgm(&mut w)?;
    w.flush()?;
    eprintln!(
        "{} points -> {}x{} descriptor, {:.1}% occupied",
        cloud.len(),
        isc.n_rings,
        isc.n_sectors,
        100.0 * isc.occupancy()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let params = SynthParams { seed: args.seed, ..SynthParams::default() };
    let started = Instant::now();
    let data = generate(&params);
    data.write_to_dir(&args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    eprintln!(
        "generated {} scans with {} staged revisits in {:.1?} -> {}",
        data.scans.len(),
        data.manifest.events.len(),
        started.elapsed(),
        args.out.display()
    );
    Ok(())
}
