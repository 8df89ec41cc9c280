//! Command-line interface: `simulate`, `detect`, `evaluate` and `sweep`.
//!
//! Exit codes: 0 on success, 1 on data errors (missing or malformed
//! files, empty inputs), 2 on usage errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::benchmark;
use crate::error::{Error, Result};
use crate::geom::{Pose, Twist};
use crate::pipeline::{write_manifest, LogRunner, PipelineConfig};
use crate::scan::{read_scan, write_scan, LabelImage, LaserRig, LidarScan};
use crate::simulate::{load_scene, simulate_scan, GroundTruth};
use crate::trajectory::Trajectory;

#[derive(Parser)]
#[command(
    name = "dynlidar",
    about = "Point-level dynamic object detection for spinning-lidar scans",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic motion-distorted scans with groundtruth.
    Simulate(SimulateArgs),
    /// Label every scan of a log as dynamic/static per point.
    Detect(DetectArgs),
    /// Score label files against groundtruth.
    Evaluate(EvaluateArgs),
    /// Rerun detection across a parameter range and tabulate PR metrics.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene file (plane / box / mover / max_range lines).
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for scan, groundtruth and trajectory files.
    #[arg(long)]
    out: PathBuf,
    /// Sensor trajectory file; omit to generate a straight drive.
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Generated-trajectory velocity "vx,vy,vz" (m/s).
    #[arg(long, default_value = "10,0,0", allow_hyphen_values = true)]
    sensor_velocity: String,
    /// Generated-trajectory sensor height above the ground (m).
    #[arg(long, default_value_t = 1.8)]
    sensor_height: f64,
    /// Number of scans to generate.
    #[arg(long, default_value_t = 20)]
    scans: usize,
    /// Range noise standard deviation (m).
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Noise stream seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Lasers on the synthetic rig.
    #[arg(long, default_value_t = 64)]
    lasers: usize,
    /// Firings per revolution.
    #[arg(long, default_value_t = 2000)]
    firings: usize,
    /// Revolutions per second.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Write scans as debug CSV instead of binary.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct DetectArgs {
    /// Directory of scan files written by `simulate`.
    #[arg(long)]
    scans: PathBuf,
    /// Trajectory file covering the log.
    #[arg(long)]
    traj: PathBuf,
    /// Pipeline config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for label files and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Parallelize per-point work (labels are identical either way).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of label files.
    #[arg(long)]
    labels: PathBuf,
    /// Directory of groundtruth files.
    #[arg(long)]
    truth: PathBuf,
    /// Scan directory (required for --range-limits).
    #[arg(long)]
    scans: Option<PathBuf>,
    /// Comma-separated range limits in meters for recall-vs-range.
    #[arg(long)]
    range_limits: Option<String>,
    /// CSV output path (per-scan counts, or recall-vs-range rows).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Config key to sweep.
    #[arg(long)]
    param: String,
    /// Values: "start:step:end" or a comma-separated list.
    #[arg(long)]
    values: String,
    /// Directory of scan files.
    #[arg(long)]
    scans: PathBuf,
    /// Directory of groundtruth files.
    #[arg(long)]
    truth: PathBuf,
    /// Trajectory file covering the log.
    #[arg(long)]
    traj: PathBuf,
    /// Base pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Parallelize per-point work.
    #[arg(long)]
    parallel: bool,
}

/// Parse and run. Returns a process exit code.
pub fn run_cli(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_vector(text: &str) -> Result<Vector3<f64>> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!("expected vx,vy,vz, got `{text}`")));
    }
    let mut v = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad number `{p}` in `{text}`")))?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    let parse = |p: &str| -> Result<f64> {
        p.trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad number `{p}` in `{text}`")))
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "range form is start:step:end, got `{text}`"
            )));
        }
        let (start, step, end) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 || end < start {
            return Err(Error::InvalidInput("need step > 0 and end >= start".into()));
        }
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            // Snap accumulated values back onto the decimal grid the user
            // wrote, so CSV rows read `0.7`, not `0.7000000000000001`.
            let v = ((start + step * k as f64) * 1e9).round() / 1e9;
            if v > end + 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        Ok(out)
    } else if text.trim().is_empty() {
        Ok(Vec::new())
    } else {
        text.split(',').map(parse).collect()
    }
}

/// `prefix000042.ext` paths in a directory, sorted by the numeric index.
fn indexed_files(dir: &Path, prefix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(index) = stem.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()) {
            out.push((index, path));
        }
    }
    out.sort();
    Ok(out)
}

fn load_scan_dir(dir: &Path) -> Result<Vec<LidarScan>> {
    let files = indexed_files(dir, "scan_")?;
    if files.is_empty() {
        return Err(Error::MissingData(format!(
            "no scan_*.bin or scan_*.csv files in {}",
            dir.display()
        )));
    }
    files.into_iter().map(|(_, path)| read_scan(path)).collect()
}

fn load_truth_dir(dir: &Path) -> Result<Vec<GroundTruth>> {
    let files = indexed_files(dir, "truth_")?;
    if files.is_empty() {
        return Err(Error::MissingData(format!(
            "no truth_*.txt files in {}",
            dir.display()
        )));
    }
    files.into_iter().map(|(_, path)| GroundTruth::read(path)).collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let rig = std::sync::Arc::new(LaserRig::synthetic(args.lasers, args.firings, args.rate));
    let span = args.scans as f64 * rig.hub_period();
    let traj = match &args.traj {
        Some(path) => Trajectory::load(path)?,
        None => {
            let velocity = parse_vector(&args.sensor_velocity)?;
            // T_v0 twist: the platform-frame motion is the negated world
            // velocity for an unrotated platform.
            let twist = Twist {
                linear: -velocity,
                angular: Vector3::zeros(),
            };
            let start = Pose::translation(Vector3::new(0.0, 0.0, -args.sensor_height));
            let dt = rig.firing_period();
            let n_knots = (span / dt).ceil() as usize + 2;
            Trajectory::constant_twist(start, twist, 0.0, dt, n_knots)?
        }
    };
    std::fs::create_dir_all(&args.out)?;
    traj.save(args.out.join("trajectory.txt"))?;
    let ext = if args.csv { "csv" } else { "bin" };
    for s in 0..args.scans {
        let (scan, truth) = simulate_scan(&scene, &rig, &traj, args.noise_sigma, args.seed, s, 0.0)?;
        write_scan(&scan, args.out.join(format!("scan_{s:06}.{ext}")))?;
        truth.write(args.out.join(format!("truth_{s:06}.txt")))?;
    }
    println!(
        "simulated {} scans of {} x {} into {}",
        args.scans,
        rig.laser_count(),
        rig.firings_per_rev(),
        args.out.display()
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let scans = load_scan_dir(&args.scans)?;
    let traj = Trajectory::load(&args.traj)?;
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.parallel = args.parallel;
    std::fs::create_dir_all(&args.out)?;
    let mut runner = LogRunner::new(&traj, cfg.clone())?;
    let mut results = Vec::new();
    let mut emit = |result: crate::pipeline::DetectionResult, out: &Path| -> Result<()> {
        result
            .labels
            .write(out.join(format!("labels_{:06}.txt", result.scan_index)))?;
        results.push(result);
        Ok(())
    };
    for scan in scans {
        if let Some(result) = runner.push(scan)? {
            emit(result, &args.out)?;
        }
    }
    for result in runner.finish()? {
        emit(result, &args.out)?;
    }
    write_manifest(args.out.join("manifest.txt"), &cfg, &results)?;
    println!(
        "labelled {} scans into {}",
        results.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let label_files = indexed_files(&args.labels, "labels_")?;
    if label_files.is_empty() {
        return Err(Error::MissingData(format!(
            "no labels_*.txt files in {}",
            args.labels.display()
        )));
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut indices = Vec::new();
    for (index, path) in &label_files {
        let truth_path = args.truth.join(format!("truth_{index:06}.txt"));
        if !truth_path.exists() {
            return Err(Error::MissingData(format!(
                "no groundtruth for scan {index} in {}",
                args.truth.display()
            )));
        }
        preds.push(LabelImage::read(path)?);
        truths.push(GroundTruth::read(truth_path)?);
        indices.push(*index);
    }
    let mut per_scan = Vec::new();
    for ((pred, truth), index) in preds.iter().zip(&truths).zip(&indices) {
        let mut counts = benchmark::count_scan(pred, truth)?;
        counts.scan_index = *index;
        per_scan.push(counts);
    }
    let report = benchmark::pr_report(per_scan);
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.4}"));
    println!(
        "scans={} P_t={} R_t={} P_a={} (N_p={}) R_a={} (N_r={})",
        report.per_scan.len(),
        fmt(report.p_total),
        fmt(report.r_total),
        fmt(report.p_avg),
        report.n_p,
        fmt(report.r_avg),
        report.n_r
    );

    if let Some(limits_text) = &args.range_limits {
        let scans_dir = args.scans.as_ref().ok_or_else(|| {
            Error::InvalidInput("--range-limits needs --scans for per-point ranges".into())
        })?;
        let limits = parse_values(limits_text)?;
        let scans: Vec<LidarScan> = load_scan_dir(scans_dir)?
            .into_iter()
            .filter(|s| indices.contains(&s.scan_index))
            .collect();
        let rows = benchmark::recall_vs_range(&preds, &truths, &scans, &limits)?;
        for row in &rows {
            println!(
                "range<={:.1}m R_t={} R_a={} (N_r={})",
                row.limit,
                fmt(row.r_total),
                fmt(row.r_avg),
                row.n_r
            );
        }
        if let Some(out) = &args.out {
            benchmark::write_range_csv(out, &rows)?;
        }
    } else if let Some(out) = &args.out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
        use std::io::Write;
        writeln!(w, "scan,TP,FP,FN")?;
        for c in &report.per_scan {
            writeln!(
                w,
                "{},{},{},{}",
                c.scan_index, c.true_positives, c.false_positives, c.false_negatives
            )?;
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let values = parse_values(&args.values)?;
    let scans = load_scan_dir(&args.scans)?;
    let truths = load_truth_dir(&args.truth)?;
    if truths.len() < scans.len() {
        return Err(Error::MissingData(format!(
            "{} scans but only {} groundtruth files",
            scans.len(),
            truths.len()
        )));
    }
    let traj = Trajectory::load(&args.traj)?;
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.parallel = args.parallel;
    let rows = benchmark::sweep(&scans, &truths, &traj, &cfg, &args.param, &values)?;
    benchmark::write_sweep_csv(&args.out, &args.param, &rows)?;
    println!(
        "swept {} over {} values into {}",
        args.param,
        rows.len(),
        args.out.display()
    );
    Ok(())
}
