//! Synthetic motion-distorted scan generator with per-point groundtruth.
//!
//! Scenes are parametric: an optional set of infinite planes, static boxes
//! and moving boxes (constant or piecewise-constant linear velocity). Every
//! firing step poses each laser through the trajectory and hub rotation,
//! casts its ray against all primitives at that instant, and records the
//! nearest hit. Groundtruth marks a point dynamic when the struck object
//! moves faster than 0.2 m/s at the firing time (strict inequality),
//! evaluated on the noiseless hit.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scan::{Label, LaserRig, LidarScan};
use crate::trajectory::Trajectory;

/// Speed above which a struck object makes the point dynamic.
pub const DYNAMIC_SPEED: f64 = 0.2;

/// Infinite plane `normal . x = offset`, unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Axis-aligned-at-rest box, rotated by `yaw` about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrim {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub yaw: f64,
}

/// Velocity segment active from `from` seconds onward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySegment {
    pub from: f64,
    pub velocity: Vector3<f64>,
}

/// A box translating with piecewise-constant linear velocity. `shape`
/// holds the pose at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Mover {
    pub shape: BoxPrim,
    pub schedule: Vec<VelocitySegment>,
}

impl Mover {
    pub fn constant(shape: BoxPrim, velocity: Vector3<f64>) -> Mover {
        Mover {
            shape,
            schedule: vec![VelocitySegment { from: 0.0, velocity }],
        }
    }

    /// Box center at time `t`: the t = 0 pose plus the integral of the
    /// piecewise velocity. Times before the first segment extrapolate
    /// with that segment's velocity.
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        let (a, b, sign) = if t >= 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
        let mut acc = Vector3::zeros();
        let mut lo = a;
        while lo < b {
            let hi = self
                .schedule
                .iter()
                .map(|s| s.from)
                .filter(|&f| f > lo && f < b)
                .fold(b, f64::min);
            acc += self.velocity_at(lo) * (hi - lo);
            lo = hi;
        }
        self.shape.center + acc * sign
    }

    pub fn velocity_at(&self, t: f64) -> Vector3<f64> {
        let mut v = self.schedule[0].velocity;
        for seg in &self.schedule {
            if t >= seg.from {
                v = seg.velocity;
            }
        }
        v
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        self.velocity_at(t).norm()
    }
}

/// Scene: static primitives, movers and the sensing range bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub boxes: Vec<BoxPrim>,
    pub movers: Vec<Mover>,
    pub max_range: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            planes: Vec::new(),
            boxes: Vec::new(),
            movers: Vec::new(),
            max_range: 120.0,
        }
    }
}

impl Scene {
    /// Stable object ids: planes, then boxes, then movers.
    pub fn object_count(&self) -> usize {
        self.planes.len() + self.boxes.len() + self.movers.len()
    }

    pub fn object_speed(&self, id: usize, t: f64) -> f64 {
        let statics = self.planes.len() + self.boxes.len();
        if id < statics {
            0.0
        } else {
            self.movers[id - statics].speed_at(t)
        }
    }
}

/// Smallest positive ray parameter hitting the plane, if any.
pub fn ray_plane_intersect(origin: &Vector3<f64>, dir: &Vector3<f64>, plane: &Plane) -> Option<f64> {
    let denom = plane.normal.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = (plane.offset - plane.normal.dot(origin)) / denom;
    (s > 1e-9).then_some(s)
}

/// Smallest positive ray parameter hitting the box (slab method). A ray
/// starting inside returns the exit-face distance.
pub fn ray_box_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    shape: &BoxPrim,
    center: &Vector3<f64>,
) -> Option<f64> {
    let (sy, cy) = (-shape.yaw).sin_cos();
    let rot = |v: &Vector3<f64>| Vector3::new(cy * v.x - sy * v.y, sy * v.x + cy * v.y, v.z);
    let o = rot(&(origin - center));
    let d = rot(dir);
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for a in 0..3 {
        let h = shape.half_extents[a];
        if d[a].abs() < 1e-15 {
            if o[a].abs() > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut t1, mut t2) = ((-h - o[a]) * inv, (h - o[a]) * inv);
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        t_min = t_min.max(t1);
        t_max = t_max.min(t2);
        if t_min > t_max {
            return None;
        }
    }
    if t_min > 1e-9 {
        Some(t_min)
    } else if t_max > 1e-9 {
        Some(t_max)
    } else {
        None
    }
}

/// Nearest hit across the whole scene at time `t`: `(range, object_id)`.
fn cast(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    let mut consider = |s: f64, id: usize| {
        if s <= scene.max_range && best.map_or(true, |(b, _)| s < b) {
            best = Some((s, id));
        }
    };
    let mut id = 0;
    for plane in &scene.planes {
        if let Some(s) = ray_plane_intersect(origin, dir, plane) {
            consider(s, id);
        }
        id += 1;
    }
    for b in &scene.boxes {
        if let Some(s) = ray_box_intersect(origin, dir, b, &b.center) {
            consider(s, id);
        }
        id += 1;
    }
    for m in &scene.movers {
        if let Some(s) = ray_box_intersect(origin, dir, &m.shape, &m.center_at(t)) {
            consider(s, id);
        }
        id += 1;
    }
    best
}

/// Per-cell groundtruth aligned to the scan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rows: usize,
    pub cols: usize,
    labels: Vec<Label>,
    objects: Vec<Option<u32>>,
    speeds: Vec<f64>,
}

impl GroundTruth {
    #[cfg(test)]
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        labels: Vec<Label>,
        objects: Vec<Option<u32>>,
        speeds: Vec<f64>,
    ) -> GroundTruth {
        debug_assert_eq!(labels.len(), rows * cols);
        debug_assert_eq!(objects.len(), rows * cols);
        debug_assert_eq!(speeds.len(), rows * cols);
        GroundTruth {
            rows,
            cols,
            labels,
            objects,
            speeds,
        }
    }

    #[inline]
    pub fn label(&self, laser: usize, firing: usize) -> Label {
        self.labels[laser * self.cols + firing]
    }

    #[inline]
    pub fn object(&self, laser: usize, firing: usize) -> Option<u32> {
        self.objects[laser * self.cols + firing]
    }

    #[inline]
    pub fn speed(&self, laser: usize, firing: usize) -> f64 {
        self.speeds[laser * self.cols + firing]
    }

    pub fn dynamic_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Dynamic).count()
    }

    /// Format mirrors the label file with object id and speed appended:
    /// `laser firing label object speed`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# laser firing label object speed")?;
        for l in 0..self.rows {
            for c in 0..self.cols {
                let i = l * self.cols + c;
                let tag = match self.labels[i] {
                    Label::Static => "S",
                    Label::Dynamic => "D",
                    Label::Invalid => "X",
                };
                match self.objects[i] {
                    Some(id) => writeln!(w, "{l} {c} {tag} {id} {:.6}", self.speeds[i])?,
                    None => writeln!(w, "{l} {c} {tag} - 0")?,
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut cells: Vec<(usize, usize, Label, Option<u32>, f64)> = Vec::new();
        let (mut max_l, mut max_c) = (0usize, 0usize);
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let f: Vec<&str> = body.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(path, lineno, "expected `laser firing label object speed`"));
            }
            let l: usize = f[0].parse().map_err(|_| Error::parse(path, lineno, "bad laser"))?;
            let c: usize = f[1].parse().map_err(|_| Error::parse(path, lineno, "bad firing"))?;
            let label = match f[2] {
                "S" => Label::Static,
                "D" => Label::Dynamic,
                "X" => Label::Invalid,
                other => return Err(Error::parse(path, lineno, format!("bad label `{other}`"))),
            };
            let object = match f[3] {
                "-" => None,
                id => Some(id.parse::<u32>().map_err(|_| Error::parse(path, lineno, "bad object id"))?),
            };
            let speed: f64 = f[4].parse().map_err(|_| Error::parse(path, lineno, "bad speed"))?;
            max_l = max_l.max(l);
            max_c = max_c.max(c);
            cells.push((l, c, label, object, speed));
        }
        let (rows, cols) = (max_l + 1, max_c + 1);
        if cells.len() != rows * cols {
            return Err(Error::parse(path, 0, "cells do not fill the grid"));
        }
        let n = rows * cols;
        let mut gt = GroundTruth {
            rows,
            cols,
            labels: vec![Label::Invalid; n],
            objects: vec![None; n],
            speeds: vec![0.0; n],
        };
        for (l, c, label, object, speed) in cells {
            let i = l * cols + c;
            gt.labels[i] = label;
            gt.objects[i] = object;
            gt.speeds[i] = speed;
        }
        Ok(gt)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Unit normal deviate for one grid slot. Indexed by (scan, laser, firing)
/// rather than draw order, so parallel generation and different noise
/// levels share the same underlying sample.
fn slot_normal(seed: u64, scan: u64, laser: u64, firing: u64) -> f64 {
    let key = splitmix64(
        splitmix64(splitmix64(seed ^ 0x6c6964_u64) ^ scan.wrapping_mul(0x9e37_79b1))
            ^ laser.wrapping_mul(0x85eb_ca77)
            ^ firing.wrapping_mul(0xc2b2_ae3d),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate `n_scans` consecutive scans starting at `t0`, with groundtruth.
///
/// All lasers fire simultaneously once per firing period. Range noise is
/// `noise_sigma` times a per-slot unit normal; zero sigma reproduces the
/// noiseless ranges bit-exactly.
pub fn simulate(
    scene: &Scene,
    rig: &Arc<LaserRig>,
    traj: &Trajectory,
    noise_sigma: f64,
    seed: u64,
    n_scans: usize,
    t0: f64,
) -> Result<Vec<(LidarScan, GroundTruth)>> {
    let mut out = Vec::with_capacity(n_scans);
    for s in 0..n_scans {
        out.push(simulate_scan(scene, rig, traj, noise_sigma, seed, s, t0)?);
    }
    Ok(out)
}

/// Generate scan `scan_index` of a log starting at `t0`.
pub fn simulate_scan(
    scene: &Scene,
    rig: &Arc<LaserRig>,
    traj: &Trajectory,
    noise_sigma: f64,
    seed: u64,
    scan_index: usize,
    t0: f64,
) -> Result<(LidarScan, GroundTruth)> {
    let rows = rig.laser_count();
    let cols = rig.firings_per_rev();
    let fp = rig.firing_period();
    let rev = cols as f64 * fp;
    let t_start = t0 + scan_index as f64 * rev;

    let n = rows * cols;
    let mut timestamps = vec![0.0; n];
    let mut ranges = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut labels = vec![Label::Invalid; n];
    let mut objects = vec![None; n];
    let mut speeds = vec![0.0; n];

    // Laser origin and boresight direction in hub coordinates.
    let origins_h: Vec<Vector3<f64>> = (0..rows).map(|l| rig.inv_extrinsic(l).translation).collect();
    let dirs_h: Vec<Vector3<f64>> = (0..rows)
        .map(|l| rig.inv_extrinsic(l).rotation * Vector3::x())
        .collect();

    for c in 0..cols {
        let t = t_start + c as f64 * fp;
        let pose = traj.pose_at(t)?;
        let hub_inv = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -rig.hub_angle(t, t_start));
        let world_rot = pose.rotation.inverse() * hub_inv;
        for l in 0..rows {
            let i = l * cols + c;
            timestamps[i] = t;
            let origin = pose.apply_inverse(&(hub_inv * origins_h[l]));
            let dir = world_rot * dirs_h[l];
            if let Some((clean, id)) = cast(scene, &origin, &dir, t) {
                let noise = if noise_sigma > 0.0 {
                    noise_sigma * slot_normal(seed, scan_index as u64, l as u64, c as u64)
                } else {
                    0.0
                };
                ranges[i] = (clean + noise).max(1e-3);
                valid[i] = true;
                let speed = scene.object_speed(id, t);
                labels[i] = if speed > DYNAMIC_SPEED {
                    Label::Dynamic
                } else {
                    Label::Static
                };
                objects[i] = Some(id as u32);
                speeds[i] = speed;
            }
        }
    }

    let scan = LidarScan::new(
        Arc::clone(rig),
        scan_index,
        t_start,
        rows,
        cols,
        timestamps,
        ranges,
        valid,
    )?;
    let truth = GroundTruth {
        rows,
        cols,
        labels,
        objects,
        speeds,
    };
    Ok((scan, truth))
}

// ---------------------------------------------------------------------------
// Scene files: one primitive per line.
//   plane nx ny nz d
//   box cx cy cz hx hy hz yaw
//   mover cx cy cz hx hy hz yaw vx vy vz
//   max_range R
// `#` starts a comment.
// ---------------------------------------------------------------------------

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut scene = Scene::default();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut it = body.split_whitespace();
        let kind = it.next().unwrap();
        let nums: Vec<f64> = it
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))
            })
            .collect::<Result<_>>()?;
        match kind {
            "plane" if nums.len() == 4 => {
                let n = Vector3::new(nums[0], nums[1], nums[2]);
                if n.norm() < 1e-9 {
                    return Err(Error::parse(path, lineno, "plane normal is zero"));
                }
                scene.planes.push(Plane {
                    normal: n / n.norm(),
                    offset: nums[3] / n.norm(),
                });
            }
            "box" if nums.len() == 7 => {
                scene.boxes.push(BoxPrim {
                    center: Vector3::new(nums[0], nums[1], nums[2]),
                    half_extents: Vector3::new(nums[3], nums[4], nums[5]),
                    yaw: nums[6],
                });
            }
            "mover" if nums.len() == 10 => {
                scene.movers.push(Mover::constant(
                    BoxPrim {
                        center: Vector3::new(nums[0], nums[1], nums[2]),
                        half_extents: Vector3::new(nums[3], nums[4], nums[5]),
                        yaw: nums[6],
                    },
                    Vector3::new(nums[7], nums[8], nums[9]),
                ));
            }
            "max_range" if nums.len() == 1 => {
                scene.max_range = nums[0];
            }
            other => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("unrecognized scene line `{other}` (or wrong field count)"),
                ))
            }
        }
    }
    for b in scene.boxes.iter().chain(scene.movers.iter().map(|m| &m.shape)) {
        if b.half_extents.min() <= 0.0 {
            return Err(Error::parse(path, 0, "box half-extents must be positive"));
        }
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# plane nx ny nz d | box cx cy cz hx hy hz yaw | mover ... vx vy vz")?;
    writeln!(w, "max_range {}", scene.max_range)?;
    for p in &scene.planes {
        writeln!(w, "plane {} {} {} {}", p.normal.x, p.normal.y, p.normal.z, p.offset)?;
    }
    for b in &scene.boxes {
        writeln!(
            w,
            "box {} {} {} {} {} {} {}",
            b.center.x, b.center.y, b.center.z, b.half_extents.x, b.half_extents.y, b.half_extents.z, b.yaw
        )?;
    }
    for m in &scene.movers {
        let v = m.schedule[0].velocity;
        let b = &m.shape;
        writeln!(
            w,
            "mover {} {} {} {} {} {} {} {} {} {}",
            b.center.x, b.center.y, b.center.z, b.half_extents.x, b.half_extents.y, b.half_extents.z, b.yaw, v.x, v.y, v.z
        )?;
    }
    Ok(())
}
