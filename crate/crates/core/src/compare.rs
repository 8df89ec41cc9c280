//! Stage 2: pointcloud comparison.
//!
//! Each valid query point is matched to its nearest neighbour in the
//! deskewed reference cloud. Points with a usable surface normal score the
//! point-to-plane error `|n_q . (p - q)|`; points without one fall back to
//! the point-to-point distance. Errors above the threshold become dynamic.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::par::maybe_par_map;
use crate::scan::{DeskewedScan, Label, LabelImage, WorldPoint};

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    /// Error above this is labelled dynamic (m).
    pub error_threshold: f64,
    /// Scans between query and backward reference.
    pub scan_gap: usize,
    /// Neighbours used for the normal covariance.
    pub normal_k: usize,
    /// Neighbourhood radius for normals (m).
    pub normal_radius: f64,
    /// Minimum neighbours for a usable normal.
    pub k_min: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            error_threshold: 0.5,
            scan_gap: 4,
            normal_k: 10,
            normal_radius: 1.0,
            k_min: 5,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.error_threshold <= 0.0 {
            return Err(Error::InvalidInput("error_threshold must be positive".into()));
        }
        if self.scan_gap < 1 {
            return Err(Error::InvalidInput("scan_gap must be at least 1".into()));
        }
        if self.normal_radius <= 0.0 || self.normal_k == 0 {
            return Err(Error::InvalidInput("normal search parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-point optional unit normals, oriented toward the sensor position at
/// the point's firing time. `None` marks points without enough neighbours
/// (or a degenerate neighbourhood); those use the point-to-point metric.
#[derive(Debug, Clone)]
pub struct NormalCloud {
    normals: Vec<Option<Vector3<f64>>>,
}

impl NormalCloud {
    #[inline]
    pub fn get(&self, point_idx: usize) -> Option<&Vector3<f64>> {
        self.normals[point_idx].as_ref()
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn planar_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }
}

/// PCA surface normals over the k nearest neighbours within the radius.
pub fn estimate_normals(
    points: &[WorldPoint],
    sensor_positions: &[Vector3<f64>],
    cfg: &CompareConfig,
) -> NormalCloud {
    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&positions);
    estimate_normals_with_tree(points, sensor_positions, &tree, cfg, false)
}

/// As [`estimate_normals`] but reusing a prebuilt tree over the same points.
pub fn estimate_normals_with_tree(
    points: &[WorldPoint],
    sensor_positions: &[Vector3<f64>],
    tree: &KdTree,
    cfg: &CompareConfig,
    parallel: bool,
) -> NormalCloud {
    assert_eq!(points.len(), sensor_positions.len());
    let normals = maybe_par_map(parallel, points, |i, _| {
        normal_for(i, points, &sensor_positions[i], tree, cfg)
    });
    NormalCloud { normals }
}

fn normal_for(
    idx: usize,
    points: &[WorldPoint],
    sensor: &Vector3<f64>,
    tree: &KdTree,
    cfg: &CompareConfig,
) -> Option<Vector3<f64>> {
    let position = points[idx].position;
    // k nearest others; the query point itself is excluded from the count
    // but contributes to the covariance like any other surface sample.
    let hits = tree.k_nearest_within(&position, cfg.normal_k + 1, cfg.normal_radius);
    let mut neighbourhood = Vec::with_capacity(cfg.normal_k + 1);
    let mut rows = [points[idx].laser; 2];
    let mut cols = [points[idx].firing; 2];
    neighbourhood.push(position);
    for h in &hits {
        if h.id as usize == idx {
            continue;
        }
        if neighbourhood.len() == cfg.normal_k + 1 {
            break;
        }
        let p = &points[h.id as usize];
        rows = [rows[0].min(p.laser), rows[1].max(p.laser)];
        cols = [cols[0].min(p.firing), cols[1].max(p.firing)];
        neighbourhood.push(p.position);
    }
    if neighbourhood.len() - 1 < cfg.k_min {
        return None;
    }
    // A patch resolved in only one laser row (or one firing column) is a
    // line sample: its cross-line extent is measurement noise, not
    // surface, whatever the covariance says.
    if rows[0] == rows[1] || cols[0] == cols[1] {
        return None;
    }
    let mean: Vector3<f64> = neighbourhood.iter().sum::<Vector3<f64>>() / neighbourhood.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &neighbourhood {
        let d = p - mean;
        cov += d * d.transpose();
    }
    if cov.trace() < 1e-16 {
        return None; // coincident samples carry no surface information
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let [min_i, mid_i, max_i] = order;
    // A usable surface patch also spans two directions geometrically and
    // is flat along the third. Collinear neighbourhoods collapse the mid
    // eigenvalue and leave the smallest eigenvector arbitrary;
    // noise-dominated neighbourhoods have no distinguished flat direction
    // at all. Both are degenerate rather than surfaces.
    if eig.eigenvalues[mid_i] < 1e-3 * eig.eigenvalues[max_i]
        || eig.eigenvalues[min_i] > 0.3 * eig.eigenvalues[mid_i]
    {
        return None;
    }
    let mut n = eig.eigenvectors.column(min_i).into_owned();
    if !n.iter().all(|v| v.is_finite()) || n.norm() < 0.5 {
        return None;
    }
    n.normalize_mut();
    if n.dot(&(sensor - position)) < 0.0 {
        n = -n;
    }
    Some(n)
}

/// Point-to-plane error `|n . (p - q)|`. `n` must be unit length.
pub fn point_to_plane(n: &Vector3<f64>, p: &Vector3<f64>, q: &Vector3<f64>) -> Result<f64> {
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "point_to_plane needs a unit normal, got |n| = {}",
            n.norm()
        )));
    }
    Ok(n.dot(&(p - q)).abs())
}

/// Point-to-point error, the Euclidean distance.
pub fn point_to_point(p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    (p - q).norm()
}

/// Label every valid query point by its comparison error against the
/// reference cloud. Nearest-neighbour ties resolve to the lowest
/// (laser, firing) reference index.
pub fn compare_scans(
    query: &DeskewedScan,
    normals: &NormalCloud,
    reference: &DeskewedScan,
    ref_tree: &KdTree,
    cfg: &CompareConfig,
    parallel: bool,
) -> Result<LabelImage> {
    if reference.points.is_empty() {
        return Err(Error::EmptyReference(reference.scan_index));
    }
    assert_eq!(normals.len(), query.points.len());
    assert_eq!(ref_tree.len(), reference.points.len());

    let dynamic = maybe_par_map(parallel, &query.points, |i, p| {
        let hit = ref_tree.nearest(&p.position).expect("non-empty reference");
        let ref_pt = reference.points[hit.id as usize].position;
        let err = match normals.get(i) {
            Some(n) => n.dot(&(ref_pt - p.position)).abs(),
            None => hit.dist2.sqrt(),
        };
        err > cfg.error_threshold
    });

    let mut labels = vec![Label::Invalid; query.rows * query.cols];
    for (slot, idx) in query.slot_index.iter().enumerate() {
        if let Some(idx) = idx {
            labels[slot] = if dynamic[*idx as usize] {
                Label::Dynamic
            } else {
                Label::Static
            };
        }
    }
    Ok(LabelImage::from_parts(query.rows, query.cols, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_points(nx: usize, ny: usize, spacing: f64, z: f64) -> Vec<WorldPoint> {
        let mut out = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                out.push(WorldPoint {
                    position: Vector3::new(i as f64 * spacing, j as f64 * spacing, z),
                    laser: i as u32,
                    firing: j as u32,
                });
            }
        }
        out
    }

    #[test]
    fn coplanar_points_get_plane_normal() {
        let points = grid_points(5, 4, 0.2, 0.0);
        let sensors = vec![Vector3::new(0.4, 0.3, 10.0); points.len()];
        let normals = estimate_normals(&points, &sensors, &CompareConfig::default());
        assert_eq!(normals.planar_count(), points.len());
        for i in 0..points.len() {
            let n = normals.get(i).unwrap();
            assert_relative_eq!(*n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn isolated_point_has_no_normal() {
        let mut points = grid_points(4, 4, 0.2, 0.0);
        points.push(WorldPoint {
            position: Vector3::new(50.0, 50.0, 0.0),
            laser: 9,
            firing: 9,
        });
        let sensors = vec![Vector3::new(0.0, 0.0, 10.0); points.len()];
        let normals = estimate_normals(&points, &sensors, &CompareConfig::default());
        assert!(normals.get(points.len() - 1).is_none());
    }

    #[test]
    fn noisy_plane_normals_match_fit_oracle() {
        // Deterministic pseudo-noise, sigma ~ 0.01 m.
        let mut points = grid_points(8, 8, 0.25, 0.0);
        for (i, p) in points.iter_mut().enumerate() {
            let jitter = ((i as f64 * 0.7311).sin() * 43758.5453).fract() - 0.5;
            p.position.z += 0.02 * jitter;
        }
        let sensors = vec![Vector3::new(1.0, 1.0, 20.0); points.len()];
        let cfg = CompareConfig::default();
        let normals = estimate_normals(&points, &sensors, &cfg);

        for i in 0..points.len() {
            let n = normals.get(i).expect("dense plane has normals");
            // Within 5 degrees of the true plane normal.
            assert!(n.dot(&Vector3::z()) > 5.0f64.to_radians().cos());

            // Oracle: brute-force neighbourhood, SVD plane fit.
            let mut dists: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, p)| ((p.position - points[i].position).norm(), j))
                .filter(|(d, _)| *d <= cfg.normal_radius)
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists.truncate(cfg.normal_k);
            let mut rows = vec![points[i].position];
            rows.extend(dists.iter().map(|&(_, j)| points[j].position));
            let mean: Vector3<f64> = rows.iter().sum::<Vector3<f64>>() / rows.len() as f64;
            let mat = nalgebra::DMatrix::from_fn(rows.len(), 3, |r, c| (rows[r] - mean)[c]);
            let svd = mat.svd(false, true);
            let vt = svd.v_t.unwrap();
            let fit = Vector3::new(vt[(2, 0)], vt[(2, 1)], vt[(2, 2)]);
            assert!(
                n.dot(&fit).abs() > (0.5f64).to_radians().cos(),
                "impl normal deviates from plane-fit oracle at point {i}"
            );
        }
    }

    #[test]
    fn point_to_plane_examples() {
        let n = Vector3::new(0.0, 0.0, 1.0);
        let q = Vector3::zeros();
        assert_relative_eq!(
            point_to_plane(&n, &Vector3::new(3.0, 4.0, 0.3), &q).unwrap(),
            0.3,
            epsilon = 1e-12
        );
        assert_eq!(point_to_plane(&n, &q, &q).unwrap(), 0.0);
        let n = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(
            point_to_plane(&n, &Vector3::new(-2.0, 5.0, 5.0), &q).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(point_to_plane(&Vector3::new(0.0, 0.0, 2.0), &q, &q).is_err());
    }

    #[test]
    fn point_to_point_examples() {
        let q = Vector3::zeros();
        assert_eq!(point_to_point(&q, &q), 0.0);
        assert_relative_eq!(point_to_point(&Vector3::new(3.0, 4.0, 0.0), &q), 5.0);
        assert_relative_eq!(
            point_to_point(&Vector3::new(1.0, 1.0, 1.0), &q),
            3.0f64.sqrt()
        );
    }

    fn as_cloud(points: Vec<WorldPoint>, rows: usize, cols: usize, scan_index: usize) -> DeskewedScan {
        let mut slot_index = vec![None; rows * cols];
        for (i, p) in points.iter().enumerate() {
            slot_index[p.laser as usize * cols + p.firing as usize] = Some(i as u32);
        }
        let sensor_positions = vec![Vector3::new(0.0, 0.0, 5.0); points.len()];
        DeskewedScan {
            scan_index,
            rows,
            cols,
            points,
            slot_index,
            sensor_positions,
        }
    }

    #[test]
    fn identical_scans_compare_all_static() {
        let points = grid_points(6, 6, 0.3, 0.0);
        let query = as_cloud(points.clone(), 6, 6, 4);
        let reference = as_cloud(points, 6, 6, 0);
        let cfg = CompareConfig::default();
        let normals = estimate_normals(&query.points, &query.sensor_positions, &cfg);
        let tree = KdTree::build(&reference.positions());
        let img = compare_scans(&query, &normals, &reference, &tree, &cfg, false).unwrap();
        assert_eq!(img.dynamic_count(), 0);
    }

    #[test]
    fn displaced_point_is_the_only_dynamic() {
        let points = grid_points(6, 6, 0.3, 0.0);
        let mut moved = points.clone();
        moved[14].position.z += 1.0; // displaced normal to the local plane
        let cell = (points[14].laser as usize, points[14].firing as usize);
        let query = as_cloud(moved, 6, 6, 4);
        let reference = as_cloud(points, 6, 6, 0);
        let cfg = CompareConfig::default();
        let normals = estimate_normals(&query.points, &query.sensor_positions, &cfg);
        let tree = KdTree::build(&reference.positions());
        let img = compare_scans(&query, &normals, &reference, &tree, &cfg, false).unwrap();
        assert_eq!(img.dynamic_cells(), vec![cell]);
    }

    #[test]
    fn empty_reference_is_an_error() {
        let query = as_cloud(grid_points(3, 3, 0.3, 0.0), 3, 3, 4);
        let reference = as_cloud(Vec::new(), 3, 3, 0);
        let cfg = CompareConfig::default();
        let normals = estimate_normals(&query.points, &query.sensor_positions, &cfg);
        let tree = KdTree::build(&[]);
        assert!(matches!(
            compare_scans(&query, &normals, &reference, &tree, &cfg, false),
            Err(Error::EmptyReference(0))
        ));
    }

    #[test]
    fn raising_threshold_never_adds_dynamic() {
        let points = grid_points(8, 8, 0.3, 0.0);
        let mut moved = points.clone();
        for (i, p) in moved.iter_mut().enumerate() {
            p.position.z += 0.05 * (i % 7) as f64; // varied displacements
        }
        let query = as_cloud(moved, 8, 8, 4);
        let reference = as_cloud(points, 8, 8, 0);
        let normals = estimate_normals(&query.points, &query.sensor_positions, &CompareConfig::default());
        let tree = KdTree::build(&reference.positions());
        let mut prev: Option<Vec<bool>> = None;
        for threshold in [0.05, 0.12, 0.2, 0.35, 0.5] {
            let cfg = CompareConfig {
                error_threshold: threshold,
                ..CompareConfig::default()
            };
            let img = compare_scans(&query, &normals, &reference, &tree, &cfg, false).unwrap();
            let mask = img.dynamic_mask();
            if let Some(prev) = &prev {
                for (was, is) in prev.iter().zip(&mask) {
                    assert!(*was || !*is, "dynamic set must shrink as threshold rises");
                }
            }
            prev = Some(mask);
        }
    }

    #[test]
    fn parallel_labels_match_serial() {
        let points = grid_points(10, 10, 0.21, 0.0);
        let mut moved = points.clone();
        for (i, p) in moved.iter_mut().enumerate() {
            p.position.x += 0.3 * ((i * 37 % 11) as f64 / 10.0);
        }
        let query = as_cloud(moved, 10, 10, 4);
        let reference = as_cloud(points, 10, 10, 0);
        let cfg = CompareConfig::default();
        let tree_q = KdTree::build(&query.positions());
        let n_serial =
            estimate_normals_with_tree(&query.points, &query.sensor_positions, &tree_q, &cfg, false);
        let n_par =
            estimate_normals_with_tree(&query.points, &query.sensor_positions, &tree_q, &cfg, true);
        let tree = KdTree::build(&reference.positions());
        let a = compare_scans(&query, &n_serial, &reference, &tree, &cfg, false).unwrap();
        let b = compare_scans(&query, &n_par, &reference, &tree, &cfg, true).unwrap();
        assert_eq!(a, b);
    }
}
