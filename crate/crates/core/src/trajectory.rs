//! Continuous-time platform trajectory.
//!
//! The trajectory stores timestamped knot poses (world frame into platform
//! frame) and answers pose and body-velocity queries at arbitrary times.
//! Consecutive knots are bridged with a constant-body-velocity segment:
//! between `(t0, P0)` and `(t1, P1)` the pose is
//! `exp(alpha * log(P1 ∘ P0⁻¹)) ∘ P0` with `alpha = (t - t0)/(t1 - t0)`.
//! Queries are allowed to extrapolate one segment duration past either end.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{Pose, Twist};

#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    poses: Vec<Pose>,
    /// Per-segment displacement twist `log(P1 ∘ P0⁻¹)`, precomputed.
    seg_twists: Vec<Twist>,
}

impl Trajectory {
    /// Build from `(timestamp, pose)` knots. Timestamps must be strictly
    /// increasing and at least one knot is required.
    pub fn new(knots: Vec<(f64, Pose)>) -> Result<Trajectory> {
        if knots.is_empty() {
            return Err(Error::InvalidInput("trajectory needs at least one knot".into()));
        }
        for pair in knots.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidInput(format!(
                    "knot timestamps must strictly increase ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        let (times, poses): (Vec<f64>, Vec<Pose>) = knots.into_iter().unzip();
        let seg_twists = poses
            .windows(2)
            .map(|p| p[1].compose(&p[0].inverse()).log())
            .collect();
        Ok(Trajectory {
            times,
            poses,
            seg_twists,
        })
    }

    /// Constant-twist trajectory sampled every `dt` starting at `t0`,
    /// with `n_knots` knots. `twist` is the body velocity in per-second units.
    pub fn constant_twist(start: Pose, twist: Twist, t0: f64, dt: f64, n_knots: usize) -> Result<Trajectory> {
        if n_knots == 0 || dt <= 0.0 {
            return Err(Error::InvalidInput("need n_knots >= 1 and dt > 0".into()));
        }
        let knots = (0..n_knots)
            .map(|i| {
                let t = t0 + i as f64 * dt;
                (t, Pose::exp(&twist.scaled(i as f64 * dt)).compose(&start))
            })
            .collect();
        Trajectory::new(knots)
    }

    /// Stationary trajectory holding `pose` over `[t0, t1]`.
    pub fn stationary(pose: Pose, t0: f64, t1: f64) -> Result<Trajectory> {
        Trajectory::new(vec![(t0, pose), (t1, pose)])
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least one knot by construction
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Queryable span including the one-segment extrapolation allowance.
    /// Single-knot trajectories are constant and unbounded.
    pub fn queryable_range(&self) -> (f64, f64) {
        let n = self.times.len();
        if n == 1 {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        let lead = self.times[1] - self.times[0];
        let tail = self.times[n - 1] - self.times[n - 2];
        (self.times[0] - lead, self.times[n - 1] + tail)
    }

    fn check_range(&self, t: f64) -> Result<()> {
        let (min, max) = self.queryable_range();
        if t < min || t > max || !t.is_finite() {
            return Err(Error::TimeOutOfRange { t, min, max });
        }
        Ok(())
    }

    /// Segment index for `t`, clamped so out-of-span times use the
    /// nearest end segment (extrapolation).
    #[inline]
    fn segment(&self, t: f64) -> usize {
        let upper = self.times.partition_point(|&k| k <= t);
        upper.saturating_sub(1).min(self.times.len() - 2)
    }

    /// Interpolated pose at `t`. Exact at knot timestamps.
    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        if self.times.len() == 1 {
            return Ok(self.poses[0]);
        }
        self.check_range(t)?;
        let i = self.segment(t);
        // Exact at the left knot (alpha = 0 short-circuits below), but the
        // final knot is only reachable with alpha = 1; return it directly.
        if t == self.times[i + 1] {
            return Ok(self.poses[i + 1]);
        }
        let alpha = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        if alpha == 0.0 {
            return Ok(self.poses[i]);
        }
        Ok(Pose::exp(&self.seg_twists[i].scaled(alpha)).compose(&self.poses[i]))
    }

    /// Body-centric velocity at `t`: the containing segment's constant twist.
    pub fn velocity_at(&self, t: f64) -> Result<Twist> {
        if self.times.len() == 1 {
            return Ok(Twist::zero());
        }
        self.check_range(t)?;
        let i = self.segment(t);
        let dt = self.times[i + 1] - self.times[i];
        Ok(self.seg_twists[i].scaled(1.0 / dt))
    }

    /// World position of the platform origin at `t`.
    pub fn sensor_position(&self, t: f64) -> Result<Vector3<f64>> {
        Ok(self.pose_at(t)?.apply_inverse(&Vector3::zeros()))
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, &Pose)> {
        self.times.iter().copied().zip(self.poses.iter())
    }

    /// Load from a text file: one `t tx ty tz qw qx qy qz` line per knot,
    /// `#` starts a comment.
    pub fn load(path: impl AsRef<Path>) -> Result<Trajectory> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut knots = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<f64> = body
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))
                })
                .collect::<Result<_>>()?;
            if fields.len() != 8 {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected 8 fields, got {}", fields.len()),
                ));
            }
            let q = crate::geom::unit_quaternion_from_parts(fields[4], fields[5], fields[6], fields[7])
                .ok_or_else(|| Error::parse(path, lineno, "quaternion is not unit length"))?;
            let pose = Pose::new(q, Vector3::new(fields[1], fields[2], fields[3]));
            if let Some(&(prev, _)) = knots.last() {
                if fields[0] <= prev {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("timestamps must strictly increase ({prev} then {})", fields[0]),
                    ));
                }
            }
            knots.push((fields[0], pose));
        }
        if knots.is_empty() {
            return Err(Error::parse(path, 0, "no knots in trajectory file"));
        }
        Trajectory::new(knots)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# t tx ty tz qw qx qy qz")?;
        for (t, p) in self.times.iter().zip(&self.poses) {
            let q = p.rotation.quaternion();
            writeln!(
                w,
                "{t:.9} {:.9} {:.9} {:.9} {:.12} {:.12} {:.12} {:.12}",
                p.translation.x, p.translation.y, p.translation.z, q.w, q.i, q.j, q.k
            )?;
        }
        Ok(())
    }
}

/// Map a platform-frame point back to the world frame (inverse pose action).
pub fn transform_to_world(pose: &Pose, point_platform: &Vector3<f64>) -> Vector3<f64> {
    pose.apply_inverse(point_platform)
}
