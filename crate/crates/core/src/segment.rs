//! Stage 5: cluster surviving dynamic points and grow each cluster over
//! parallel or convex neighbours to recover partially labelled objects.
//!
//! Clustering is radially bounded nearest neighbour: two points share a
//! cluster iff a chain of hops within the radius connects them. Clusters
//! below the minimum size dissolve and their points demote to static.
//! Growth then walks outward from cluster members, admitting a
//! neighbouring point when the pair is convex or the normals are parallel;
//! this is the only stage allowed to add dynamic labels.

use std::collections::VecDeque;

use nalgebra::Vector3;

use crate::compare::NormalCloud;
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::scan::{DeskewedScan, Label, LabelImage};

#[derive(Debug, Clone, PartialEq)]
pub struct GrowConfig {
    /// RBNN connectivity radius (m).
    pub rbnn_radius: f64,
    /// Clusters smaller than this dissolve to static.
    pub min_cluster_size: usize,
    /// Neighbour search radius during growth (m).
    pub grow_radius: f64,
    /// Normal dot-product threshold for the parallelism test.
    pub parallel_cos: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig {
            rbnn_radius: 0.5,
            min_cluster_size: 5,
            grow_radius: 0.5,
            parallel_cos: 0.99,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rbnn_radius <= 0.0 || self.grow_radius <= 0.0 {
            return Err(Error::InvalidInput("cluster radii must be positive".into()));
        }
        if !(0.0 < self.parallel_cos && self.parallel_cos < 1.0) {
            return Err(Error::InvalidInput("parallel_cos must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One object cluster on the scan grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub id: u32,
    /// Member cells as (laser, firing), in ascending grid order.
    pub members: Vec<(u32, u32)>,
    /// Dynamic members present before region growth.
    pub seed_count: usize,
}

/// Radially bounded nearest neighbour clustering of the given points.
/// Returns the surviving clusters (ids numbered in first-member order)
/// and the indices of points dissolved by the minimum-size rule.
pub fn rbnn_cluster(
    points: &[(usize, Vector3<f64>)],
    cfg: &GrowConfig,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let positions: Vec<Vector3<f64>> = points.iter().map(|(_, p)| *p).collect();
    let tree = KdTree::build(&positions);
    let mut assigned = vec![false; points.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut dissolved: Vec<usize> = Vec::new();
    for start in 0..points.len() {
        if assigned[start] {
            continue;
        }
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        assigned[start] = true;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            for hit in tree.within_radius(&positions[i], cfg.rbnn_radius) {
                let j = hit.id as usize;
                if !assigned[j] {
                    assigned[j] = true;
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        if members.len() < cfg.min_cluster_size {
            dissolved.extend(members);
        } else {
            clusters.push(members);
        }
    }
    dissolved.sort_unstable();
    (clusters, dissolved)
}

/// Two surface points are convex when each lies on or below the other's
/// tangent plane. Normals must be unit length.
pub fn is_convex(
    p1: &Vector3<f64>,
    n1: &Vector3<f64>,
    p2: &Vector3<f64>,
    n2: &Vector3<f64>,
) -> Result<bool> {
    for n in [n1, n2] {
        if (n.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "is_convex needs unit normals, got |n| = {}",
                n.norm()
            )));
        }
    }
    Ok(convex_unchecked(p1, n1, p2, n2))
}

#[inline]
fn convex_unchecked(
    p1: &Vector3<f64>,
    n1: &Vector3<f64>,
    p2: &Vector3<f64>,
    n2: &Vector3<f64>,
) -> bool {
    // Coplanar pairs are meant to satisfy both tests through equality; a
    // nanometer slack keeps that case deterministic under float rounding.
    const EPS: f64 = 1e-9;
    n1.dot(&(p2 - p1)) <= EPS && n2.dot(&(p1 - p2)) <= EPS
}

/// Grow clusters over static neighbours that pass the parallel-or-convex
/// test; a point reachable from two clusters joins the one with the lower
/// id and the clusters merge. Returns the final clusters and the updated
/// label image (cluster ids assigned on every dynamic cell).
pub fn region_grow(
    seed_clusters: &[Vec<usize>],
    cloud: &DeskewedScan,
    normals: &NormalCloud,
    labels: &LabelImage,
    tree: &KdTree,
    cfg: &GrowConfig,
) -> (Vec<Cluster>, LabelImage) {
    let n_points = cloud.points.len();
    // Union-find over seed cluster ids, lowest id as representative.
    let mut parent: Vec<u32> = (0..seed_clusters.len() as u32).collect();
    fn find(parent: &mut Vec<u32>, mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    let mut owner: Vec<Option<u32>> = vec![None; n_points];
    let mut seed_of: Vec<bool> = vec![false; n_points];
    for (id, members) in seed_clusters.iter().enumerate() {
        for &i in members {
            owner[i] = Some(id as u32);
            seed_of[i] = true;
        }
    }

    // Clusters expand in ascending id order; the first claim on a point
    // stands, and a later cluster reaching an owned point merges with it.
    for id in 0..seed_clusters.len() as u32 {
        let mut queue: VecDeque<usize> = seed_clusters[id as usize].iter().copied().collect();
        while let Some(u) = queue.pop_front() {
            let Some(nu) = normals.get(u) else {
                continue; // both growth tests need a normal on the frontier
            };
            let pu = cloud.points[u].position;
            for hit in tree.within_radius(&pu, cfg.grow_radius) {
                let w = hit.id as usize;
                if w == u {
                    continue;
                }
                let Some(nw) = normals.get(w) else {
                    continue;
                };
                let pw = cloud.points[w].position;
                let admissible = nu.dot(nw) >= cfg.parallel_cos
                    || convex_unchecked(&pu, nu, &pw, nw);
                if !admissible {
                    continue;
                }
                match owner[w] {
                    None => {
                        owner[w] = Some(id);
                        queue.push_back(w);
                    }
                    Some(other) => {
                        let ra = find(&mut parent, other);
                        let rb = find(&mut parent, id);
                        if ra != rb {
                            let (lo, hi) = (ra.min(rb), ra.max(rb));
                            parent[hi as usize] = lo;
                        }
                    }
                }
            }
        }
    }

    // Renumber merged roots densely in first-appearance (point) order.
    let mut final_id: Vec<Option<u32>> = vec![None; seed_clusters.len()];
    let mut next = 0u32;
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut seeds: Vec<usize> = Vec::new();
    for i in 0..n_points {
        if let Some(cl) = owner[i] {
            let root = find(&mut parent, cl) as usize;
            let id = *final_id[root].get_or_insert_with(|| {
                let id = next;
                next += 1;
                members.push(Vec::new());
                seeds.push(0);
                id
            });
            members[id as usize].push(i);
            if seed_of[i] {
                seeds[id as usize] += 1;
            }
        }
    }

    let mut out = labels.clone();
    let clusters: Vec<Cluster> = members
        .into_iter()
        .zip(seeds)
        .enumerate()
        .map(|(id, (pts, seed_count))| {
            let mut cells = Vec::with_capacity(pts.len());
            for i in pts {
                let p = &cloud.points[i];
                out.set(p.laser as usize, p.firing as usize, Label::Dynamic);
                out.set_cluster_id(p.laser as usize, p.firing as usize, Some(id as u32));
                cells.push((p.laser, p.firing));
            }
            cells.sort_unstable();
            Cluster {
                id: id as u32,
                members: cells,
                seed_count,
            }
        })
        .collect();
    (clusters, out)
}
