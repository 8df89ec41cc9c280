//! Scan container, measurement model, deskewing and scan/label file I/O.
//!
//! A scan is one full hub revolution, stored as a dense `L x C` grid with
//! laser index as the row and firing index as the column. Slots without a
//! return are kept in the grid and flagged invalid; they carry no freespace
//! information and every stage skips them.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::trajectory::Trajectory;

const SCAN_MAGIC: &[u8; 4] = b"DLSC";
const SCAN_VERSION: u32 = 1;

/// Laser rig: per-laser extrinsics, hub rate and firing schedule.
///
/// `extrinsics[l]` is the transform taking hub-frame coordinates into the
/// frame of laser `l`; the laser boresight is the laser-frame +x axis.
/// Lasers are indexed by strictly increasing elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserRig {
    extrinsics: Vec<Pose>,
    inv_extrinsics: Vec<Pose>,
    omega: f64,
    firing_period: f64,
}

impl LaserRig {
    pub fn new(extrinsics: Vec<Pose>, omega: f64, firing_period: f64) -> Result<LaserRig> {
        if extrinsics.is_empty() {
            return Err(Error::InvalidInput("rig needs at least one laser".into()));
        }
        if omega <= 0.0 || firing_period <= 0.0 {
            return Err(Error::InvalidInput(
                "omega and firing_period must be positive".into(),
            ));
        }
        let inv_extrinsics: Vec<Pose> = extrinsics.iter().map(|p| p.inverse()).collect();
        let elevations: Vec<f64> = inv_extrinsics
            .iter()
            .map(|inv| {
                let dir = inv.rotation * Vector3::x();
                dir.z.asin()
            })
            .collect();
        for pair in elevations.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidInput(format!(
                    "laser elevations must strictly increase ({} then {} rad)",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(LaserRig {
            extrinsics,
            inv_extrinsics,
            omega,
            firing_period,
        })
    }

    /// Synthetic 64-laser rig: elevations evenly spaced from -24.8 deg to
    /// +2 deg, a 3 cm radial offset and a 10 cm vertical stack. One firing
    /// of all lasers per step, 2000 steps per revolution at 10 Hz.
    pub fn synthetic_64() -> LaserRig {
        Self::synthetic(64, 2000, 10.0)
    }

    /// Synthetic rig with `lasers` beams over the same elevation fan,
    /// `firings` steps per revolution and `rate_hz` revolutions per second.
    pub fn synthetic(lasers: usize, firings: usize, rate_hz: f64) -> LaserRig {
        assert!(lasers >= 2 && firings >= 4 && rate_hz > 0.0);
        let lo = -24.8f64.to_radians();
        let hi = 2.0f64.to_radians();
        let extrinsics = (0..lasers)
            .map(|l| {
                let elev = lo + (hi - lo) * l as f64 / (lasers - 1) as f64;
                let z = -0.05 + 0.10 * l as f64 / (lasers - 1) as f64;
                // Laser frame in hub frame: pitch up by elev, then offset.
                let laser_in_hub = Pose::new(
                    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -elev),
                    Vector3::new(0.03, 0.0, z),
                );
                laser_in_hub.inverse()
            })
            .collect();
        let omega = std::f64::consts::TAU * rate_hz;
        let firing_period = 1.0 / (rate_hz * firings as f64);
        LaserRig::new(extrinsics, omega, firing_period).expect("synthetic rig is valid")
    }

    pub fn laser_count(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn firing_period(&self) -> f64 {
        self.firing_period
    }

    /// Hub revolution duration.
    pub fn hub_period(&self) -> f64 {
        std::f64::consts::TAU / self.omega
    }

    /// Firings per revolution implied by omega and the firing period.
    pub fn firings_per_rev(&self) -> usize {
        (self.hub_period() / self.firing_period).round() as usize
    }

    /// Hub-to-laser transform for laser `l`.
    pub fn extrinsic(&self, l: usize) -> &Pose {
        &self.extrinsics[l]
    }

    /// Laser-to-hub transform for laser `l`.
    pub fn inv_extrinsic(&self, l: usize) -> &Pose {
        &self.inv_extrinsics[l]
    }

    /// Boresight elevation of laser `l` above the hub xy-plane.
    pub fn elevation(&self, l: usize) -> f64 {
        (self.inv_extrinsics[l].rotation * Vector3::x()).z.asin()
    }

    /// Hub angle at time `t` for a scan starting at `t_start`.
    #[inline]
    pub fn hub_angle(&self, t: f64, t_start: f64) -> f64 {
        self.omega * (t - t_start)
    }
}

/// One grid slot: a (possibly absent) return of one laser at one firing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub laser: u32,
    pub firing: u32,
    pub timestamp: f64,
    pub range: f64,
    pub valid: bool,
}

/// A full-revolution scan as a dense laser-by-firing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub rig: Arc<LaserRig>,
    pub scan_index: usize,
    pub t_start: f64,
    rows: usize,
    cols: usize,
    timestamps: Vec<f64>,
    ranges: Vec<f64>,
    valid: Vec<bool>,
}

impl LidarScan {
    /// Build and validate a scan from dense grids (laser-major layout).
    pub fn new(
        rig: Arc<LaserRig>,
        scan_index: usize,
        t_start: f64,
        rows: usize,
        cols: usize,
        timestamps: Vec<f64>,
        ranges: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<LidarScan> {
        let n = rows * cols;
        if rows != rig.laser_count() {
            return Err(Error::GridMismatch(format!(
                "scan has {rows} rows but rig has {} lasers",
                rig.laser_count()
            )));
        }
        if timestamps.len() != n || ranges.len() != n || valid.len() != n {
            return Err(Error::GridMismatch(format!(
                "grids must have {n} slots ({rows} x {cols})"
            )));
        }
        let span = cols as f64 * rig.firing_period();
        if (rig.omega() * span - std::f64::consts::TAU).abs() > rig.omega() * rig.firing_period() {
            return Err(Error::InvalidInput(format!(
                "scan does not cover one revolution: omega * span = {}",
                rig.omega() * span
            )));
        }
        let scan = LidarScan {
            rig,
            scan_index,
            t_start,
            rows,
            cols,
            timestamps,
            ranges,
            valid,
        };
        let t_end = scan.t_end();
        for l in 0..rows {
            for c in 0..cols {
                let i = l * cols + c;
                let ts = scan.timestamps[i];
                if ts < t_start - 1e-12 || ts > t_end + 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "measurement ({l},{c}) timestamp {ts} outside scan span"
                    )));
                }
                if c > 0 && ts <= scan.timestamps[i - 1] {
                    return Err(Error::InvalidInput(format!(
                        "column timestamps must strictly increase at ({l},{c})"
                    )));
                }
                if scan.valid[i] && scan.ranges[i] <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "valid measurement ({l},{c}) has non-positive range"
                    )));
                }
            }
        }
        Ok(scan)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn slots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.cols as f64 * self.rig.firing_period()
    }

    #[inline]
    pub fn index(&self, laser: usize, firing: usize) -> usize {
        laser * self.cols + firing
    }

    #[inline]
    pub fn measurement(&self, laser: usize, firing: usize) -> Measurement {
        let i = self.index(laser, firing);
        Measurement {
            laser: laser as u32,
            firing: firing as u32,
            timestamp: self.timestamps[i],
            range: self.ranges[i],
            valid: self.valid[i],
        }
    }

    #[inline]
    pub fn is_valid(&self, laser: usize, firing: usize) -> bool {
        self.valid[self.index(laser, firing)]
    }

    #[inline]
    pub fn range(&self, laser: usize, firing: usize) -> f64 {
        self.ranges[self.index(laser, firing)]
    }

    #[inline]
    pub fn timestamp(&self, laser: usize, firing: usize) -> f64 {
        self.timestamps[self.index(laser, firing)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// A deskewed endpoint in the world frame, traceable to its measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint {
    pub position: Vector3<f64>,
    pub laser: u32,
    pub firing: u32,
}

/// Deskewed scan: world-frame endpoints for every valid slot, plus the
/// world-frame sensor position at each firing time.
#[derive(Debug, Clone)]
pub struct DeskewedScan {
    pub scan_index: usize,
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<WorldPoint>,
    /// Grid slot -> index into `points` (valid slots only), laser-major.
    pub slot_index: Vec<Option<u32>>,
    pub sensor_positions: Vec<Vector3<f64>>,
}

impl DeskewedScan {
    pub fn point_at(&self, laser: usize, firing: usize) -> Option<&WorldPoint> {
        self.slot_index[laser * self.cols + firing].map(|i| &self.points[i as usize])
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Transform every valid measurement endpoint into the world frame using
/// the firing-time pose. The chain is laser -> hub (inverse extrinsic),
/// hub -> platform (z-rotation by the hub angle, inverted), platform ->
/// world (inverse trajectory pose).
pub fn deskew(scan: &LidarScan, traj: &Trajectory) -> Result<DeskewedScan> {
    let rows = scan.rows();
    let cols = scan.cols();
    let mut points = Vec::with_capacity(scan.valid_count());
    let mut sensor_positions = Vec::with_capacity(scan.valid_count());
    let mut slot_index = vec![None; rows * cols];

    // Endpoint of a zero-range return, per laser, in hub coordinates; the
    // unit boresight direction completes the endpoint for any range.
    let rig = scan.rig.as_ref();
    let origins_h: Vec<Vector3<f64>> = (0..rows)
        .map(|l| rig.inv_extrinsic(l).translation)
        .collect();
    let dirs_h: Vec<Vector3<f64>> = (0..rows)
        .map(|l| rig.inv_extrinsic(l).rotation * Vector3::x())
        .collect();

    let mut cached_t = f64::NAN;
    let mut cached_pose = Pose::identity();
    let mut cached_hub = UnitQuaternion::identity();
    // Column-major iteration: all lasers of a firing share a timestamp, so
    // the trajectory query and hub rotation are computed once per column.
    for c in 0..cols {
        for l in 0..rows {
            if !scan.is_valid(l, c) {
                continue;
            }
            let m = scan.measurement(l, c);
            if m.timestamp != cached_t {
                cached_pose = traj.pose_at(m.timestamp)?;
                let angle = rig.hub_angle(m.timestamp, scan.t_start);
                // Inverse of T_hv(t): hub coordinates back to platform.
                cached_hub = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -angle);
                cached_t = m.timestamp;
            }
            let hub_pt = origins_h[l] + dirs_h[l] * m.range;
            let platform_pt = cached_hub * hub_pt;
            let world = cached_pose.apply_inverse(&platform_pt);
            slot_index[l * cols + c] = Some(points.len() as u32);
            points.push(WorldPoint {
                position: world,
                laser: l as u32,
                firing: c as u32,
            });
            sensor_positions.push(cached_pose.apply_inverse(&Vector3::zeros()));
        }
    }
    Ok(DeskewedScan {
        scan_index: scan.scan_index,
        rows,
        cols,
        points,
        slot_index,
        sensor_positions,
    })
}

/// Per-point label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Static,
    Dynamic,
    Invalid,
}

/// Per-measurement labels on the scan image grid, with optional cluster
/// ids on dynamic cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub rows: usize,
    pub cols: usize,
    labels: Vec<Label>,
    cluster_ids: Vec<Option<u32>>,
}

impl LabelImage {
    /// All-static image with `Invalid` exactly where the scan has no return.
    pub fn all_static(scan: &LidarScan) -> LabelImage {
        let labels = (0..scan.rows())
            .flat_map(|l| (0..scan.cols()).map(move |c| (l, c)))
            .map(|(l, c)| {
                if scan.is_valid(l, c) {
                    Label::Static
                } else {
                    Label::Invalid
                }
            })
            .collect();
        LabelImage {
            rows: scan.rows(),
            cols: scan.cols(),
            labels,
            cluster_ids: vec![None; scan.slots()],
        }
    }

    /// Assemble an image directly from a flat label grid. Internal stages
    /// already know their validity pattern; file loads go through
    /// [`LabelImage::from_slots`] which checks it against a scan.
    pub(crate) fn from_parts(rows: usize, cols: usize, labels: Vec<Label>) -> LabelImage {
        debug_assert_eq!(labels.len(), rows * cols);
        let n = labels.len();
        LabelImage {
            rows,
            cols,
            labels,
            cluster_ids: vec![None; n],
        }
    }

    /// Arrange flat per-slot labels onto the image grid (row = laser,
    /// column = firing). Bijective with the measurement grid.
    pub fn from_slots(scan: &LidarScan, labels: &[Label]) -> Result<LabelImage> {
        if labels.len() != scan.slots() {
            return Err(Error::GridMismatch(format!(
                "{} labels for {} slots",
                labels.len(),
                scan.slots()
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            let valid = scan.valid[i];
            if valid && *label == Label::Invalid {
                return Err(Error::InvalidInput(format!(
                    "slot {i} is a valid measurement but labelled Invalid"
                )));
            }
            if !valid && *label != Label::Invalid {
                return Err(Error::InvalidInput(format!(
                    "slot {i} has no return but is labelled as a point"
                )));
            }
        }
        Ok(LabelImage {
            rows: scan.rows(),
            cols: scan.cols(),
            labels: labels.to_vec(),
            cluster_ids: vec![None; scan.slots()],
        })
    }

    #[inline]
    pub fn get(&self, laser: usize, firing: usize) -> Label {
        self.labels[laser * self.cols + firing]
    }

    #[inline]
    pub fn set(&mut self, laser: usize, firing: usize, label: Label) {
        let i = laser * self.cols + firing;
        self.labels[i] = label;
        if label != Label::Dynamic {
            self.cluster_ids[i] = None;
        }
    }

    #[inline]
    pub fn cluster_id(&self, laser: usize, firing: usize) -> Option<u32> {
        self.cluster_ids[laser * self.cols + firing]
    }

    pub fn set_cluster_id(&mut self, laser: usize, firing: usize, id: Option<u32>) {
        let i = laser * self.cols + firing;
        debug_assert!(id.is_none() || self.labels[i] == Label::Dynamic);
        self.cluster_ids[i] = id;
    }

    pub fn flat(&self) -> &[Label] {
        &self.labels
    }

    pub fn dynamic_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Dynamic).count()
    }

    /// Grid cells currently labelled dynamic, in laser-major order.
    pub fn dynamic_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.rows {
            for c in 0..self.cols {
                if self.get(l, c) == Label::Dynamic {
                    out.push((l, c));
                }
            }
        }
        out
    }

    /// Bitmask of dynamic cells, for cheap set-inclusion checks.
    pub fn dynamic_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Label::Dynamic).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# laser firing label cluster")?;
        for l in 0..self.rows {
            for c in 0..self.cols {
                let tag = match self.get(l, c) {
                    Label::Static => "S",
                    Label::Dynamic => "D",
                    Label::Invalid => "X",
                };
                match self.cluster_id(l, c) {
                    Some(id) => writeln!(w, "{l} {c} {tag} {id}")?,
                    None => writeln!(w, "{l} {c} {tag} -")?,
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<LabelImage> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut cells: Vec<(usize, usize, Label, Option<u32>)> = Vec::new();
        let (mut max_l, mut max_c) = (0usize, 0usize);
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(path, lineno, "expected `laser firing label cluster`"));
            }
            let l: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad laser index"))?;
            let c: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad firing index"))?;
            let label = match fields[2] {
                "S" => Label::Static,
                "D" => Label::Dynamic,
                "X" => Label::Invalid,
                other => return Err(Error::parse(path, lineno, format!("bad label `{other}`"))),
            };
            let cluster = match fields[3] {
                "-" => None,
                id => Some(
                    id.parse::<u32>()
                        .map_err(|_| Error::parse(path, lineno, "bad cluster id"))?,
                ),
            };
            if cluster.is_some() && label != Label::Dynamic {
                return Err(Error::parse(path, lineno, "cluster id on a non-dynamic cell"));
            }
            max_l = max_l.max(l);
            max_c = max_c.max(c);
            cells.push((l, c, label, cluster));
        }
        let (rows, cols) = (max_l + 1, max_c + 1);
        if cells.len() != rows * cols {
            return Err(Error::parse(
                path,
                0,
                format!("{} cells do not fill a {rows} x {cols} grid", cells.len()),
            ));
        }
        let mut labels = vec![None; rows * cols];
        let mut cluster_ids = vec![None; rows * cols];
        for (l, c, label, cluster) in cells {
            let i = l * cols + c;
            if labels[i].is_some() {
                return Err(Error::parse(path, 0, format!("duplicate cell ({l},{c})")));
            }
            labels[i] = Some(label);
            cluster_ids[i] = cluster;
        }
        Ok(LabelImage {
            rows,
            cols,
            labels: labels.into_iter().map(Option::unwrap).collect(),
            cluster_ids,
        })
    }
}

// ---------------------------------------------------------------------------
// Scan file I/O. Binary layout (little-endian):
//   magic "DLSC", version u32, L u32, C u32, scan_index u64,
//   omega f64, firing_period f64, t_start f64,
//   L extrinsic poses as 7 x f64 (tx ty tz qw qx qy qz, hub -> laser),
//   L*C records { timestamp f64, range f64, valid u8 }, laser-major.
// A `.csv` extension selects a text encoding of the same content.
// ---------------------------------------------------------------------------

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(
                self.path,
                self.pos,
                "unexpected end of file (truncated scan)",
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn write_scan(scan: &LidarScan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "csv") {
        return write_scan_csv(scan, path);
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(SCAN_MAGIC)?;
    w.write_all(&SCAN_VERSION.to_le_bytes())?;
    w.write_all(&(scan.rows() as u32).to_le_bytes())?;
    w.write_all(&(scan.cols() as u32).to_le_bytes())?;
    w.write_all(&(scan.scan_index as u64).to_le_bytes())?;
    w.write_all(&scan.rig.omega().to_le_bytes())?;
    w.write_all(&scan.rig.firing_period().to_le_bytes())?;
    w.write_all(&scan.t_start.to_le_bytes())?;
    for l in 0..scan.rows() {
        let e = scan.rig.extrinsic(l);
        let q = e.rotation.quaternion();
        for v in [e.translation.x, e.translation.y, e.translation.z, q.w, q.i, q.j, q.k] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for l in 0..scan.rows() {
        for c in 0..scan.cols() {
            let m = scan.measurement(l, c);
            w.write_all(&m.timestamp.to_le_bytes())?;
            w.write_all(&m.range.to_le_bytes())?;
            w.write_all(&[m.valid as u8])?;
        }
    }
    Ok(())
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<LidarScan> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "csv") {
        return read_scan_csv(path);
    }
    let buf = std::fs::read(path)?;
    let mut r = ByteReader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != SCAN_MAGIC {
        return Err(Error::parse(path, 0, "not a scan file (bad magic)"));
    }
    let version = r.u32()?;
    if version != SCAN_VERSION {
        return Err(Error::parse(path, 4, format!("unsupported version {version}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 || rows > 4096 || cols > 1 << 20 {
        return Err(Error::parse(path, 8, format!("implausible grid {rows} x {cols}")));
    }
    let scan_index = r.u64()? as usize;
    let omega = r.f64()?;
    let firing_period = r.f64()?;
    let t_start = r.f64()?;
    let mut extrinsics = Vec::with_capacity(rows);
    for _ in 0..rows {
        let tx = r.f64()?;
        let ty = r.f64()?;
        let tz = r.f64()?;
        let qw = r.f64()?;
        let qx = r.f64()?;
        let qy = r.f64()?;
        let qz = r.f64()?;
        let q = crate::geom::unit_quaternion_from_parts(qw, qx, qy, qz)
            .ok_or_else(|| Error::parse(path, r.pos, "extrinsic quaternion not unit length"))?;
        extrinsics.push(Pose::new(q, Vector3::new(tx, ty, tz)));
    }
    let rig = LaserRig::new(extrinsics, omega, firing_period)
        .map_err(|e| Error::parse(path, r.pos, e.to_string()))?;
    let n = rows * cols;
    let mut timestamps = Vec::with_capacity(n);
    let mut ranges = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        timestamps.push(r.f64()?);
        ranges.push(r.f64()?);
        match r.u8()? {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::parse(
                    path,
                    i,
                    format!("valid flag must be 0 or 1, got {other}"),
                ))
            }
        }
    }
    if r.pos != buf.len() {
        return Err(Error::parse(path, r.pos, "trailing bytes after scan records"));
    }
    LidarScan::new(
        Arc::new(rig),
        scan_index,
        t_start,
        rows,
        cols,
        timestamps,
        ranges,
        valid,
    )
    .map_err(|e| Error::parse(path, 0, e.to_string()))
}

fn write_scan_csv(scan: &LidarScan, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "scan,{},{},{}", scan.scan_index, scan.rows(), scan.cols())?;
    writeln!(
        w,
        "rig,{:.17e},{:.17e},{:.17e}",
        scan.rig.omega(),
        scan.rig.firing_period(),
        scan.t_start
    )?;
    for l in 0..scan.rows() {
        let e = scan.rig.extrinsic(l);
        let q = e.rotation.quaternion();
        writeln!(
            w,
            "laser,{l},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            e.translation.x, e.translation.y, e.translation.z, q.w, q.i, q.j, q.k
        )?;
    }
    for l in 0..scan.rows() {
        for c in 0..scan.cols() {
            let m = scan.measurement(l, c);
            writeln!(
                w,
                "m,{l},{c},{:.17e},{:.17e},{}",
                m.timestamp,
                m.range,
                m.valid as u8
            )?;
        }
    }
    Ok(())
}

fn read_scan_csv(path: &Path) -> Result<LidarScan> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut scan_line: Option<(usize, usize, usize)> = None;
    let mut rig_line: Option<(f64, f64, f64)> = None;
    let mut extrinsics: Vec<Pose> = Vec::new();
    let mut records: Vec<(usize, usize, f64, f64, bool)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split(',').collect();
        let fail = |msg: &str| Error::parse(path, lineno, msg);
        match fields[0] {
            "scan" if fields.len() == 4 => {
                scan_line = Some((
                    fields[1].parse().map_err(|_| fail("bad scan index"))?,
                    fields[2].parse().map_err(|_| fail("bad row count"))?,
                    fields[3].parse().map_err(|_| fail("bad column count"))?,
                ));
            }
            "rig" if fields.len() == 4 => {
                rig_line = Some((
                    fields[1].parse().map_err(|_| fail("bad omega"))?,
                    fields[2].parse().map_err(|_| fail("bad firing period"))?,
                    fields[3].parse().map_err(|_| fail("bad t_start"))?,
                ));
            }
            "laser" if fields.len() == 9 => {
                let nums: Vec<f64> = fields[2..]
                    .iter()
                    .map(|f| f.parse().map_err(|_| fail("bad extrinsic number")))
                    .collect::<Result<_>>()?;
                let q = crate::geom::unit_quaternion_from_parts(nums[3], nums[4], nums[5], nums[6])
                    .ok_or_else(|| fail("extrinsic quaternion not unit length"))?;
                extrinsics.push(Pose::new(q, Vector3::new(nums[0], nums[1], nums[2])));
            }
            "m" if fields.len() == 6 => {
                records.push((
                    fields[1].parse().map_err(|_| fail("bad laser index"))?,
                    fields[2].parse().map_err(|_| fail("bad firing index"))?,
                    fields[3].parse().map_err(|_| fail("bad timestamp"))?,
                    fields[4].parse().map_err(|_| fail("bad range"))?,
                    match fields[5] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(fail("valid flag must be 0 or 1")),
                    },
                ));
            }
            _ => return Err(fail("unrecognized csv row")),
        }
    }
    let (scan_index, rows, cols) =
        scan_line.ok_or_else(|| Error::parse(path, 0, "missing `scan` row"))?;
    let (omega, firing_period, t_start) =
        rig_line.ok_or_else(|| Error::parse(path, 0, "missing `rig` row"))?;
    if extrinsics.len() != rows {
        return Err(Error::parse(path, 0, "laser row count mismatch"));
    }
    if records.len() != rows * cols {
        return Err(Error::parse(path, 0, "measurement row count mismatch"));
    }
    let rig = LaserRig::new(extrinsics, omega, firing_period)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let n = rows * cols;
    let mut timestamps = vec![0.0; n];
    let mut ranges = vec![0.0; n];
    let mut valid = vec![false; n];
    for (l, c, ts, range, v) in records {
        if l >= rows || c >= cols {
            return Err(Error::parse(path, 0, format!("cell ({l},{c}) out of grid")));
        }
        let i = l * cols + c;
        timestamps[i] = ts;
        ranges[i] = range;
        valid[i] = v;
    }
    LidarScan::new(
        Arc::new(rig),
        scan_index,
        t_start,
        rows,
        cols,
        timestamps,
        ranges,
        valid,
    )
    .map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Twist;
    use approx::assert_relative_eq;

    /// Single-laser rig with identity extrinsic: 10 Hz, 8 firings per rev.
    fn mono_rig() -> Arc<LaserRig> {
        Arc::new(
            LaserRig::new(
                vec![Pose::identity()],
                std::f64::consts::TAU * 10.0,
                0.1 / 8.0,
            )
            .unwrap(),
        )
    }

    /// Scan on `rig` whose every slot is valid with constant `range`.
    fn constant_scan(rig: &Arc<LaserRig>, t_start: f64, range: f64) -> LidarScan {
        let rows = rig.laser_count();
        let cols = rig.firings_per_rev();
        let mut timestamps = vec![0.0; rows * cols];
        for l in 0..rows {
            for c in 0..cols {
                timestamps[l * cols + c] = t_start + c as f64 * rig.firing_period();
            }
        }
        LidarScan::new(
            Arc::clone(rig),
            0,
            t_start,
            rows,
            cols,
            timestamps,
            vec![range; rows * cols],
            vec![true; rows * cols],
        )
        .unwrap()
    }

    fn stationary_traj(t0: f64, t1: f64) -> Trajectory {
        Trajectory::stationary(Pose::identity(), t0, t1).unwrap()
    }

    #[test]
    fn rig_rejects_non_increasing_elevations() {
        let up = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -0.1),
            Vector3::zeros(),
        )
        .inverse();
        let err = LaserRig::new(vec![up, up], 1.0, 0.1);
        assert!(err.is_err());
    }

    #[test]
    fn synthetic_rig_shape() {
        let rig = LaserRig::synthetic_64();
        assert_eq!(rig.laser_count(), 64);
        assert_eq!(rig.firings_per_rev(), 2000);
        assert_relative_eq!(rig.elevation(0), -24.8f64.to_radians(), epsilon = 1e-9);
        assert_relative_eq!(rig.elevation(63), 2.0f64.to_radians(), epsilon = 1e-9);
        // 64 x 2000 grid: the full-revolution slot count.
        let scan = constant_scan(&Arc::new(LaserRig::synthetic_64()), 0.0, 5.0);
        assert_eq!(scan.slots(), 128_000);
    }

    #[test]
    fn deskew_stationary_boresight() {
        let rig = mono_rig();
        let scan = constant_scan(&rig, 0.0, 5.0);
        let traj = stationary_traj(-0.1, 0.3);
        let cloud = deskew(&scan, &traj).unwrap();
        // Hub angle 0 at the first firing: endpoint straight down +x.
        let p = cloud.point_at(0, 0).unwrap();
        assert_relative_eq!(p.position, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
        // Hub angle 90 deg at firing 2 (8 firings per rev). The sweep
        // direction convention is fixed by this assertion: +90 deg of hub
        // rotation points the boresight at world -y.
        let p = cloud.point_at(0, 2).unwrap();
        assert_relative_eq!(p.position, Vector3::new(0.0, -5.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn deskew_translated_sensor_matches_matrix_oracle() {
        let rig = mono_rig();
        let scan = constant_scan(&rig, 0.0, 5.0);
        // Platform pose T_v0 with translation (-1,0,0): the sensor sits at
        // world (1,0,0).
        let pose = Pose::translation(Vector3::new(-1.0, 0.0, 0.0));
        let traj = Trajectory::stationary(pose, -0.1, 0.3).unwrap();
        let cloud = deskew(&scan, &traj).unwrap();
        let got = cloud.point_at(0, 0).unwrap().position;

        // Independent 4x4 chain: world = inv(T_lh * T_hv * T_v0) * endpoint.
        let mut m = nalgebra::Matrix4::<f64>::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
        let world = m.try_inverse().unwrap() * nalgebra::Vector4::new(5.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(got, world.xyz(), epsilon = 1e-12);
        assert_relative_eq!(got, Vector3::new(6.0, 0.0, 0.0), epsilon = 1e-12);
        // Differs from the untranslated case by exactly the sensor offset.
        assert_relative_eq!(
            cloud.sensor_positions[0],
            Vector3::new(1.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn deskew_stationary_matches_spherical_conversion() {
        let rig = Arc::new(LaserRig::synthetic(8, 16, 10.0));
        let scan = constant_scan(&rig, 2.0, 17.5);
        let traj = stationary_traj(1.9, 2.3);
        let cloud = deskew(&scan, &traj).unwrap();
        for l in 0..8 {
            let elev = rig.elevation(l);
            let t_l = rig.inv_extrinsic(l).translation;
            for c in 0..16 {
                let theta = rig.omega() * (scan.timestamp(l, c) - scan.t_start);
                let (s, co) = (-theta).sin_cos();
                // Laser origin and boresight, rotated by the hub angle.
                let rot = |v: Vector3<f64>| {
                    Vector3::new(co * v.x - s * v.y, s * v.x + co * v.y, v.z)
                };
                let dir = rot(Vector3::new(elev.cos(), 0.0, elev.sin()));
                let expected = rot(t_l) + dir * 17.5;
                let got = cloud.point_at(l, c).unwrap().position;
                assert_relative_eq!(got, expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn deskew_names_offending_timestamp() {
        let rig = mono_rig();
        let scan = constant_scan(&rig, 0.0, 5.0);
        // Trajectory too short for the scan span.
        let traj = stationary_traj(0.0, 0.01);
        match deskew(&scan, &traj) {
            Err(Error::TimeOutOfRange { t, .. }) => assert!(t > 0.01),
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }

    #[test]
    fn deskew_moving_sensor_shifts_endpoints() {
        let rig = mono_rig();
        let scan = constant_scan(&rig, 0.0, 5.0);
        let twist = Twist {
            linear: Vector3::new(-2.0, 0.0, 0.0), // platform moving +x in world
            angular: Vector3::zeros(),
        };
        let traj = Trajectory::constant_twist(Pose::identity(), twist, 0.0, 0.0125, 40).unwrap();
        let cloud = deskew(&scan, &traj).unwrap();
        // First firing at t = 0: sensor still at the origin.
        let p0 = cloud.point_at(0, 0).unwrap().position;
        let sensor_mid = cloud.sensor_positions[cloud.slot_index[4].unwrap() as usize];
        assert_relative_eq!(p0, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-9);
        // By firing 4 (t = 0.05 s) it has advanced 2 m/s * 0.05 s.
        assert_relative_eq!(sensor_mid.x, 2.0 * 4.0 * 0.0125, epsilon = 1e-9);
    }

    #[test]
    fn label_image_construction() {
        let rig = Arc::new(LaserRig::synthetic(4, 8, 10.0));
        let mut scan = constant_scan(&rig, 0.0, 5.0);
        scan.valid[5] = false; // (0, 5)
        let img = LabelImage::all_static(&scan);
        assert_eq!(img.get(0, 5), Label::Invalid);
        assert_eq!(img.get(0, 4), Label::Static);
        assert_eq!(img.dynamic_count(), 0);

        // Single dynamic cell lands at exactly (3, 7).
        let mut flat = img.flat().to_vec();
        flat[3 * 8 + 7] = Label::Dynamic;
        let img2 = LabelImage::from_slots(&scan, &flat).unwrap();
        assert_eq!(img2.dynamic_cells(), vec![(3, 7)]);

        // Round trip image -> flat -> image is the identity.
        let img3 = LabelImage::from_slots(&scan, img2.flat()).unwrap();
        assert_eq!(img2, img3);

        // Count mismatch is an error.
        assert!(LabelImage::from_slots(&scan, &flat[1..]).is_err());
        // Invalid on a valid slot is an error.
        flat[0] = Label::Invalid;
        assert!(LabelImage::from_slots(&scan, &flat).is_err());
    }

    #[test]
    fn label_file_round_trip() {
        let rig = Arc::new(LaserRig::synthetic(4, 8, 10.0));
        let mut scan = constant_scan(&rig, 0.0, 5.0);
        scan.valid[9] = false;
        let mut img = LabelImage::all_static(&scan);
        img.set(2, 3, Label::Dynamic);
        img.set_cluster_id(2, 3, Some(7));
        img.set(1, 1, Label::Invalid);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        img.write(&path).unwrap();
        let back = LabelImage::read(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn scan_constructor_validates() {
        let rig = mono_rig();
        let cols = rig.firings_per_rev();
        let ts: Vec<f64> = (0..cols).map(|c| c as f64 * rig.firing_period()).collect();

        // Non-positive range on a valid slot.
        let bad = LidarScan::new(
            Arc::clone(&rig),
            0,
            0.0,
            1,
            cols,
            ts.clone(),
            vec![0.0; cols],
            vec![true; cols],
        );
        assert!(matches!(bad, Err(Error::InvalidInput(_))));

        // Non-monotone column timestamps.
        let mut ts_bad = ts.clone();
        ts_bad.swap(2, 3);
        let bad = LidarScan::new(
            Arc::clone(&rig),
            0,
            0.0,
            1,
            cols,
            ts_bad,
            vec![1.0; cols],
            vec![true; cols],
        );
        assert!(bad.is_err());

        // Grid that is not one revolution.
        let bad = LidarScan::new(
            Arc::clone(&rig),
            0,
            0.0,
            1,
            4,
            ts[..4].to_vec(),
            vec![1.0; 4],
            vec![true; 4],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn scan_file_round_trip_binary_and_csv() {
        let rig = Arc::new(LaserRig::synthetic(4, 8, 10.0));
        let mut scan = constant_scan(&rig, 1.25, 42.0);
        scan.valid[3] = false;
        scan.ranges[3] = 0.0;
        scan.scan_index = 17;

        let dir = tempfile::tempdir().unwrap();
        for name in ["scan.bin", "scan.csv"] {
            let path = dir.path().join(name);
            write_scan(&scan, &path).unwrap();
            let back = read_scan(&path).unwrap();
            assert_eq!(scan, back, "round trip through {name}");
        }
    }

    #[test]
    fn truncated_scan_file_is_rejected() {
        let rig = Arc::new(LaserRig::synthetic(4, 8, 10.0));
        let scan = constant_scan(&rig, 0.0, 5.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_scan(&scan, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_scan(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn corrupt_range_in_file_is_rejected() {
        let rig = Arc::new(LaserRig::synthetic(4, 8, 10.0));
        let scan = constant_scan(&rig, 0.0, 5.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_scan(&scan, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First record sits after the fixed header and 4 extrinsics.
        let header = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 8 + 4 * 56;
        bytes[header + 8..header + 16].copy_from_slice(&(-3.0f64).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_scan(&path), Err(Error::Parse { .. })));
    }
}
