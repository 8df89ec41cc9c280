//! Stage 3: motion-compensated freespace check.
//!
//! For each dynamic-labelled point the reference scan's nearest ray is
//! found by minimizing the point-to-line distance over (laser, time):
//!
//! `e_l(t) = D * T_lh * T_hv(t) * T_v0(t) * [q0; 1]`
//!
//! where `D` keeps the laser-frame (y, z) components and `T_hv(t)` is the
//! hub rotation `Rz(omega * (t - t_start))` phased to the reference scan's
//! start. Time is solved with Gauss-Newton per laser; lasers are walked in
//! elevation order from an angular nearest-neighbour initialization. The
//! ray endpoint then classifies the point as inside, on the border of, or
//! outside freespace, and non-inside points are demoted to static. A
//! backward pass (gap scans earlier) runs first; points outside backward
//! freespace get a forward pass against a later scan.
//!
//! The (y, z) selector also vanishes for points *behind* a laser; rays are
//! half-lines, so initialization is always forward-aligned and the oracle
//! tests restrict themselves to forward matches the same way.

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::compare::NormalCloud;
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::par::maybe_par_map;
use crate::scan::{DeskewedScan, Label, LabelImage, LaserRig, LidarScan, Measurement};
use crate::trajectory::Trajectory;

/// Distance from the hub axis below which the time Jacobian is considered
/// rank-deficient for every laser.
const AXIS_DEGENERACY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FreespaceConfig {
    /// Half-width of the border band around the surface plane (m).
    /// Defaults to the comparison error threshold.
    pub border_tol: f64,
    /// Gauss-Newton time-step convergence tolerance (s).
    pub gn_tol: f64,
    /// Gauss-Newton iteration cap per laser.
    pub gn_max_iter: usize,
    /// Scans between query and forward reference.
    pub forward_gap: usize,
}

impl Default for FreespaceConfig {
    fn default() -> Self {
        FreespaceConfig {
            border_tol: 0.5,
            gn_tol: 1e-7,
            gn_max_iter: 20,
            forward_gap: 1,
        }
    }
}

/// Freespace relation of a query point to a reference ray's endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreespaceVerdict {
    Inside,
    Border,
    Outside,
}

/// Outcome of the nearest-ray search for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySolveResult {
    pub laser: u32,
    pub time: f64,
    pub residual: f64,
    /// Valid reference measurement on `laser` closest in time to `time`.
    pub measurement: Measurement,
    /// Accepted Gauss-Newton steps of the winning per-laser solve.
    pub iterations: usize,
}

/// Reference scan prepared for freespace queries: deskewed endpoints plus
/// an angular nearest-neighbour index of endpoint directions, both
/// expressed in the hub frame at the scan's midpoint time.
pub struct FreespaceRef<'a> {
    pub scan: &'a LidarScan,
    pub cloud: &'a DeskewedScan,
    world_to_hub_mid: crate::geom::Pose,
    dir_tree: KdTree,
}

impl<'a> FreespaceRef<'a> {
    pub fn new(scan: &'a LidarScan, cloud: &'a DeskewedScan, traj: &Trajectory) -> Result<FreespaceRef<'a>> {
        let t_mid = 0.5 * (scan.t_start + scan.t_end());
        let pose_mid = traj.pose_at(t_mid)?;
        let hub = crate::geom::Pose::rot_z(scan.rig.hub_angle(t_mid, scan.t_start));
        let world_to_hub_mid = hub.compose(&pose_mid);
        let dirs: Vec<Vector3<f64>> = cloud
            .points
            .iter()
            .map(|p| {
                let h = world_to_hub_mid.apply(&p.position);
                let n = h.norm();
                if n < 1e-9 {
                    Vector3::x()
                } else {
                    h / n
                }
            })
            .collect();
        let dir_tree = KdTree::build(&dirs);
        Ok(FreespaceRef {
            scan,
            cloud,
            world_to_hub_mid,
            dir_tree,
        })
    }
}

/// Point-to-line residual of laser `laser`'s ray for world point `q0` at
/// time `t`, phased to a reference scan starting at `t_ref_start`.
pub fn ray_residual(
    q0: &Vector3<f64>,
    laser: usize,
    t: f64,
    rig: &LaserRig,
    traj: &Trajectory,
    t_ref_start: f64,
) -> Result<Vector2<f64>> {
    let pose = traj.pose_at(t)?;
    let x = pose.apply(q0);
    let theta = rig.hub_angle(t, t_ref_start);
    let y = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta) * x;
    let z = rig.extrinsic(laser).apply(&y);
    Ok(Vector2::new(z.y, z.z))
}

struct Eval {
    e: Vector2<f64>,
    jac: Vector2<f64>,
    /// Distance of the point from the hub rotation axis.
    axis_dist: f64,
}

fn residual_jacobian(
    q0: &Vector3<f64>,
    laser: usize,
    t: f64,
    rig: &LaserRig,
    traj: &Trajectory,
    t_ref_start: f64,
) -> Result<Eval> {
    let pose = traj.pose_at(t)?;
    let twist = traj.velocity_at(t)?;
    let x = pose.apply(q0);
    let xdot = twist.linear + twist.angular.cross(&x);
    let theta = rig.hub_angle(t, t_ref_start);
    let r_hv = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta);
    let y = r_hv * x;
    let ydot = rig.omega() * Vector3::z().cross(&y) + r_hv * xdot;
    let ext = rig.extrinsic(laser);
    let z = ext.apply(&y);
    let zdot = ext.rotation * ydot;
    Ok(Eval {
        e: Vector2::new(z.y, z.z),
        jac: Vector2::new(zdot.y, zdot.z),
        axis_dist: (y.x * y.x + y.y * y.y).sqrt(),
    })
}

/// One per-laser time solve.
#[derive(Debug, Clone, Copy)]
pub struct TimeSolve {
    pub time: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Gauss-Newton minimization of `0.5 * |e|^2` over `t`, clamped to the
/// reference span padded by half a hub period (and to the trajectory's
/// queryable range). `iterations` counts accepted steps; an initially
/// converged solve reports zero.
pub fn solve_time(
    q0: &Vector3<f64>,
    laser: usize,
    t_init: f64,
    rig: &LaserRig,
    traj: &Trajectory,
    ref_span: (f64, f64),
    cfg: &FreespaceConfig,
) -> Result<TimeSolve> {
    let half_hub = 0.5 * rig.hub_period();
    let (traj_lo, traj_hi) = traj.queryable_range();
    let lo = (ref_span.0 - half_hub).max(traj_lo);
    let hi = (ref_span.1 + half_hub).min(traj_hi);

    let mut t = t_init.clamp(lo, hi);
    let mut cur = residual_jacobian(q0, laser, t, rig, traj, ref_span.0)?;
    let mut cost = cur.e.norm_squared();
    let mut iterations = 0usize;
    let (mut best_t, mut best_cost) = (t, cost);

    let jac_floor = (rig.omega() * AXIS_DEGENERACY).powi(2);
    for _ in 0..cfg.gn_max_iter {
        let jtj = cur.jac.norm_squared();
        if jtj <= jac_floor {
            if cur.axis_dist < AXIS_DEGENERACY {
                return Err(Error::DegenerateGeometry(cur.axis_dist));
            }
            break; // flat spot away from the axis: keep the best so far
        }
        let mut dt = -cur.jac.dot(&cur.e) / jtj;
        if dt.abs() < cfg.gn_tol {
            break;
        }
        // Backtrack until the cost stops increasing.
        let mut stepped = false;
        for _ in 0..8 {
            let t_new = (t + dt).clamp(lo, hi);
            if t_new == t {
                break;
            }
            let next = residual_jacobian(q0, laser, t_new, rig, traj, ref_span.0)?;
            let c = next.e.norm_squared();
            if c <= cost {
                t = t_new;
                cur = next;
                cost = c;
                stepped = true;
                break;
            }
            dt *= 0.5;
        }
        if !stepped {
            break;
        }
        iterations += 1;
        if cost < best_cost {
            best_t = t;
            best_cost = cost;
        }
        if dt.abs() < cfg.gn_tol {
            break;
        }
    }
    Ok(TimeSolve {
        time: best_t,
        residual: best_cost.sqrt(),
        iterations,
    })
}

/// Initialization for the iterative search: express the query point in the
/// reference hub frame at the scan midpoint and take the reference
/// measurement whose endpoint direction (computed the same way) is
/// angularly closest. Returns that measurement's laser and timestamp.
pub fn init_guess(q0: &Vector3<f64>, reference: &FreespaceRef) -> (usize, f64) {
    let h = reference.world_to_hub_mid.apply(q0);
    let n = h.norm();
    let t_mid = 0.5 * (reference.scan.t_start + reference.scan.t_end());
    if n < 1e-9 || reference.dir_tree.is_empty() {
        return (0, t_mid);
    }
    let dir = h / n;
    let hit = reference.dir_tree.nearest(&dir).expect("non-empty tree");
    let p = &reference.cloud.points[hit.id as usize];
    (
        p.laser as usize,
        reference.scan.timestamp(p.laser as usize, p.firing as usize),
    )
}

/// Full nearest-ray search: solve the initial laser and its elevation
/// neighbours, then walk single laser steps in the improving direction
/// until the optimized residual stops decreasing.
pub fn nearest_ray(
    q0: &Vector3<f64>,
    reference: &FreespaceRef,
    traj: &Trajectory,
    cfg: &FreespaceConfig,
) -> Result<RaySolveResult> {
    let rig = reference.scan.rig.as_ref();
    let span = (reference.scan.t_start, reference.scan.t_end());
    let count = rig.laser_count();
    let (l0, t0) = init_guess(q0, reference);

    let solve = |l: usize, t_init: f64| solve_time(q0, l, t_init, rig, traj, span, cfg);

    let center = solve(l0, t0)?;
    let mut best = (l0, center);
    let improve =
        |cand: (usize, TimeSolve), best: &mut (usize, TimeSolve)| -> bool {
            if cand.1.residual < best.1.residual
                || (cand.1.residual == best.1.residual && cand.0 < best.0)
            {
                *best = cand;
                true
            } else {
                false
            }
        };

    let up = if l0 + 1 < count {
        Some(solve(l0 + 1, center.time)?)
    } else {
        None
    };
    let down = if l0 > 0 {
        Some(solve(l0 - 1, center.time)?)
    } else {
        None
    };

    let mut walk: Option<(isize, TimeSolve)> = None;
    match (&up, &down) {
        (Some(u), Some(d)) => {
            if u.residual < center.residual || d.residual < center.residual {
                walk = if u.residual <= d.residual {
                    Some((1, *u))
                } else {
                    Some((-1, *d))
                };
            }
        }
        (Some(u), None) if u.residual < center.residual => walk = Some((1, *u)),
        (None, Some(d)) if d.residual < center.residual => walk = Some((-1, *d)),
        _ => {}
    }
    if let Some(u) = up {
        improve((l0 + 1, u), &mut best);
    }
    if let Some(d) = down {
        improve((l0 - 1, d), &mut best);
    }

    if let Some((dir, mut cur_solve)) = walk {
        let mut cur_l = (l0 as isize + dir) as usize;
        loop {
            let next_l = cur_l as isize + dir;
            if next_l < 0 || next_l >= count as isize {
                break;
            }
            let next = solve(next_l as usize, cur_solve.time)?;
            if next.residual < cur_solve.residual {
                cur_l = next_l as usize;
                cur_solve = next;
                improve((cur_l, cur_solve), &mut best);
            } else {
                break;
            }
        }
    }

    let (laser, solved) = best;
    let measurement = closest_valid_measurement(reference.scan, laser, solved.time)?;
    Ok(RaySolveResult {
        laser: laser as u32,
        time: solved.time,
        residual: solved.residual,
        measurement,
        iterations: solved.iterations,
    })
}

/// Valid measurement on `laser` with timestamp closest to `t`, ties to the
/// earlier firing. Errors when none lies within half a hub period plus one
/// firing period of `t`.
fn closest_valid_measurement(scan: &LidarScan, laser: usize, t: f64) -> Result<Measurement> {
    let cols = scan.cols();
    // Last column with timestamp <= t.
    let mut left: isize = -1;
    for c in 0..cols {
        if scan.timestamp(laser, c) <= t {
            left = c as isize;
        } else {
            break;
        }
    }
    let mut right = left + 1;
    let max_gap = scan.rig.firing_period() + 0.5 * scan.rig.hub_period();
    loop {
        let lt = (left >= 0).then(|| (t - scan.timestamp(laser, left as usize)).abs());
        let rt = (right < cols as isize).then(|| (scan.timestamp(laser, right as usize) - t).abs());
        let take_left = match (lt, rt) {
            (Some(l), Some(r)) => l <= r,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => return Err(Error::NoValidMeasurement(t)),
        };
        let (c, dist) = if take_left {
            (left as usize, lt.unwrap())
        } else {
            (right as usize, rt.unwrap())
        };
        if dist > max_gap {
            return Err(Error::NoValidMeasurement(t));
        }
        if scan.is_valid(laser, c) {
            return Ok(scan.measurement(laser, c));
        }
        if take_left {
            left -= 1;
        } else {
            right += 1;
        }
    }
}

/// Three-case test against the query point's surface plane: the signed
/// plane offset of the deskewed ray endpoint decides between piercing the
/// plane (inside freespace), lying on it (border) and falling short
/// (outside). Points without a normal are conservatively border, as are
/// points whose nearest ray still misses them by more than the border
/// tolerance (for example inside the reference scan's under-sensor blind
/// cone): such a ray cannot test the surface plane.
pub fn classify_freespace(
    q0: &Vector3<f64>,
    normal: Option<&Vector3<f64>>,
    result: &RaySolveResult,
    reference: &FreespaceRef,
    border_tol: f64,
) -> FreespaceVerdict {
    let Some(n) = normal else {
        return FreespaceVerdict::Border;
    };
    if result.residual > border_tol {
        return FreespaceVerdict::Border;
    }
    let Some(endpoint) = reference
        .cloud
        .point_at(result.measurement.laser as usize, result.measurement.firing as usize)
    else {
        return FreespaceVerdict::Border;
    };
    // n is oriented toward the sensor, so an endpoint beyond the plane
    // (away from the sensor) has negative offset: the ray pierced it.
    let d = n.dot(&(endpoint.position - q0));
    if d.abs() <= border_tol {
        FreespaceVerdict::Border
    } else if d < 0.0 {
        FreespaceVerdict::Inside
    } else {
        FreespaceVerdict::Outside
    }
}

/// Counters from one freespace pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreespaceStats {
    pub checked: usize,
    pub kept_backward_inside: usize,
    pub demoted_border: usize,
    pub forward_checked: usize,
    pub kept_forward_inside: usize,
    pub demoted_forward: usize,
    pub forward_skipped: usize,
    pub solver_fallbacks: usize,
}

/// Forward reference supplier for [`freespace_check`]: the endpoint
/// direction index is only worth building when some point is actually
/// outside backward freespace.
pub enum ForwardSource<'a> {
    Missing,
    Scan(&'a LidarScan, &'a DeskewedScan),
    Prepared(&'a FreespaceRef<'a>),
}

/// Run the backward pass over every dynamic point, and the forward pass
/// over the points backward classified as outside freespace. Static points
/// are never touched; the output dynamic set is a subset of the input's.
#[allow(clippy::too_many_arguments)]
pub fn freespace_check(
    labels: &LabelImage,
    query: &DeskewedScan,
    normals: &NormalCloud,
    backward: &FreespaceRef,
    forward: ForwardSource,
    traj: &Trajectory,
    cfg: &FreespaceConfig,
    parallel: bool,
) -> Result<(LabelImage, FreespaceStats, Vec<String>)> {
    let cells = labels.dynamic_cells();
    let point_of = |l: usize, c: usize| {
        let idx = query.slot_index[l * query.cols + c].expect("dynamic cell has a point") as usize;
        (idx, query.points[idx].position)
    };

    // Backward pass over every dynamic point. A point without a normal is
    // border regardless of the solved ray, so its solve is skipped.
    let backward_verdicts = maybe_par_map(parallel, &cells, |_, &(l, c)| {
        let (idx, q0) = point_of(l, c);
        let Some(n) = normals.get(idx) else {
            return (FreespaceVerdict::Border, false);
        };
        match nearest_ray(&q0, backward, traj, cfg) {
            Ok(res) => (
                classify_freespace(&q0, Some(n), &res, backward, cfg.border_tol),
                false,
            ),
            Err(_) => (FreespaceVerdict::Border, true),
        }
    });

    let outside: Vec<(usize, usize)> = cells
        .iter()
        .zip(&backward_verdicts)
        .filter(|(_, (v, _))| *v == FreespaceVerdict::Outside)
        .map(|(&cell, _)| cell)
        .collect();

    // Forward pass, only for the outside points.
    let have_forward = !matches!(forward, ForwardSource::Missing);
    let built;
    let forward_ref: Option<&FreespaceRef> = match forward {
        ForwardSource::Missing => None,
        ForwardSource::Prepared(r) => Some(r),
        ForwardSource::Scan(scan, cloud) => {
            if outside.is_empty() {
                None
            } else {
                built = FreespaceRef::new(scan, cloud, traj)?;
                Some(&built)
            }
        }
    };
    let forward_keep: Vec<bool> = match forward_ref {
        None => vec![false; outside.len()],
        Some(fref) => maybe_par_map(parallel, &outside, |_, &(l, c)| {
            let (idx, q0) = point_of(l, c);
            let n = normals.get(idx);
            let verdict = match nearest_ray(&q0, fref, traj, cfg) {
                Ok(res) => classify_freespace(&q0, n, &res, fref, cfg.border_tol),
                Err(_) => FreespaceVerdict::Border,
            };
            verdict == FreespaceVerdict::Inside
        }),
    };

    let mut out = labels.clone();
    let mut stats = FreespaceStats {
        checked: cells.len(),
        ..Default::default()
    };
    let mut outside_iter = forward_keep.iter();
    for (&(l, c), &(verdict, fallback)) in cells.iter().zip(&backward_verdicts) {
        if fallback {
            stats.solver_fallbacks += 1;
        }
        match verdict {
            FreespaceVerdict::Inside => stats.kept_backward_inside += 1,
            FreespaceVerdict::Border => {
                stats.demoted_border += 1;
                out.set(l, c, Label::Static);
            }
            FreespaceVerdict::Outside => {
                let keep = *outside_iter.next().expect("one entry per outside point");
                if !have_forward {
                    stats.forward_skipped += 1;
                    out.set(l, c, Label::Static);
                } else {
                    stats.forward_checked += 1;
                    if keep {
                        stats.kept_forward_inside += 1;
                    } else {
                        stats.demoted_forward += 1;
                        out.set(l, c, Label::Static);
                    }
                }
            }
        }
    }
    let mut warnings = Vec::new();
    if stats.forward_skipped > 0 {
        warnings.push(format!(
            "no forward scan: demoted {} outside-freespace points without the forward pass",
            stats.forward_skipped
        ));
    }
    Ok((out, stats, warnings))
}
