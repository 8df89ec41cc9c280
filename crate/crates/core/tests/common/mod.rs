//! Shared scenario builders for the integration and acceptance suites.
#![allow(dead_code)]

use std::sync::Arc;

use dynlidar::benchmark::{count_scan, pr_report, PRReport, ScanCounts};
use dynlidar::geom::{Pose, Twist};
use dynlidar::pipeline::{DetectionResult, LogRunner, PipelineConfig};
use dynlidar::scan::{LaserRig, LidarScan};
use dynlidar::simulate::{simulate_scan, BoxPrim, GroundTruth, Mover, Plane, Scene};
use dynlidar::trajectory::Trajectory;
use nalgebra::Vector3;

pub fn ground() -> Plane {
    Plane {
        normal: Vector3::z(),
        offset: 0.0,
    }
}

/// Straight drive along +x at `speed`, sensor `height` above the ground,
/// with one knot per firing step covering `n_scans` revolutions.
pub fn straight_trajectory(rig: &LaserRig, speed: f64, height: f64, n_scans: usize) -> Trajectory {
    let twist = Twist {
        linear: Vector3::new(-speed, 0.0, 0.0),
        angular: Vector3::zeros(),
    };
    let start = Pose::translation(Vector3::new(0.0, 0.0, -height));
    let dt = rig.firing_period();
    let span = (n_scans + 1) as f64 * rig.hub_period();
    Trajectory::constant_twist(start, twist, 0.0, dt, (span / dt) as usize + 2)
        .expect("valid trajectory")
}

/// The one-box benchmark scene: flat ground and a single vehicle-sized
/// mover with 0.3 m ground clearance sliding on a diagonal at 5 m/s.
pub fn one_box_scene() -> Scene {
    Scene {
        planes: vec![ground()],
        boxes: vec![],
        movers: vec![Mover::constant(
            BoxPrim {
                center: Vector3::new(55.0, 22.0, 1.05),
                half_extents: Vector3::new(2.0, 1.0, 0.75),
                yaw: 0.0,
            },
            // |v| = 5 m/s exactly, with a lateral component so every
            // vertical face plane displaces between compared scans.
            Vector3::new(-4.769696007084728, -1.5, 0.0),
        )],
        max_range: 120.0,
    }
}

/// Static-only scene: ground, buildings and a thin fence.
pub fn static_scene() -> Scene {
    Scene {
        planes: vec![ground()],
        boxes: vec![
            BoxPrim {
                center: Vector3::new(25.0, -14.0, 3.0),
                half_extents: Vector3::new(6.0, 2.0, 3.0),
                yaw: 0.1,
            },
            BoxPrim {
                center: Vector3::new(45.0, 16.0, 4.0),
                half_extents: Vector3::new(8.0, 3.0, 4.0),
                yaw: -0.3,
            },
            BoxPrim {
                center: Vector3::new(70.0, -10.0, 2.0),
                half_extents: Vector3::new(5.0, 5.0, 2.0),
                yaw: 0.6,
            },
            BoxPrim {
                center: Vector3::new(60.0, 6.0, 0.75),
                half_extents: Vector3::new(12.0, 0.1, 0.75),
                yaw: 0.0,
            },
            BoxPrim {
                center: Vector3::new(100.0, -20.0, 5.0),
                half_extents: Vector3::new(10.0, 4.0, 5.0),
                yaw: 0.2,
            },
        ],
        movers: vec![],
        max_range: 120.0,
    }
}

/// One well-sampled mover nearby plus one slow mover near the range limit.
pub fn near_far_scene() -> Scene {
    Scene {
        planes: vec![ground()],
        boxes: vec![],
        movers: vec![
            Mover::constant(
                BoxPrim {
                    center: Vector3::new(24.0, 14.0, 1.05),
                    half_extents: Vector3::new(2.0, 1.0, 0.75),
                    yaw: 0.0,
                },
                Vector3::new(-4.6, -1.9, 0.0),
            ),
            Mover::constant(
                BoxPrim {
                    center: Vector3::new(105.0, 30.0, 1.05),
                    half_extents: Vector3::new(2.0, 1.0, 0.75),
                    yaw: 0.0,
                },
                // Above the 0.2 m/s groundtruth rule, below the
                // detectability bound: truth-dynamic but undetected.
                Vector3::new(-0.8, -0.6, 0.0),
            ),
        ],
        max_range: 120.0,
    }
}

pub fn shipped_scene(name: &str) -> Scene {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenes")
        .join(name);
    dynlidar::simulate::load_scene(path).expect("shipped scene parses")
}

pub struct SimLog {
    pub rig: Arc<LaserRig>,
    pub traj: Trajectory,
    pub scans: Vec<LidarScan>,
    pub truths: Vec<GroundTruth>,
}

pub fn simulate_log(
    scene: &Scene,
    rig: Arc<LaserRig>,
    traj: Trajectory,
    sigma: f64,
    seed: u64,
    n_scans: usize,
) -> SimLog {
    let mut scans = Vec::with_capacity(n_scans);
    let mut truths = Vec::with_capacity(n_scans);
    for s in 0..n_scans {
        let (scan, truth) =
            simulate_scan(scene, &rig, &traj, sigma, seed, s, 0.0).expect("simulation succeeds");
        scans.push(scan);
        truths.push(truth);
    }
    SimLog {
        rig,
        traj,
        scans,
        truths,
    }
}

pub struct RunOutput {
    pub results: Vec<DetectionResult>,
    pub per_scan: Vec<ScanCounts>,
    pub report: PRReport,
}

/// Stream the whole log through the pipeline and score it.
pub fn run_log(log: &SimLog, cfg: &PipelineConfig) -> RunOutput {
    let mut runner = LogRunner::new(&log.traj, cfg.clone()).expect("valid config");
    let mut results = Vec::new();
    for scan in &log.scans {
        if let Some(r) = runner.push(scan.clone()).expect("detection succeeds") {
            results.push(r);
        }
    }
    results.extend(runner.finish().expect("finish succeeds"));
    let per_scan: Vec<ScanCounts> = results
        .iter()
        .map(|r| count_scan(&r.labels, &log.truths[r.scan_index]).expect("congruent grids"))
        .collect();
    let report = pr_report(per_scan.clone());
    RunOutput {
        results,
        per_scan,
        report,
    }
}

/// Deterministic pseudo-random stream for test sampling.
pub struct TestRng(pub u64);

impl TestRng {
    /// Uniform in [-1, 1).
    pub fn pm1(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        self.pm1() * 0.5 + 0.5
    }
}
