//! Exact 3-D nearest-neighbour search with deterministic tie-breaking.
//!
//! Labels must not depend on worker count or traversal order, so every
//! query resolves equal distances by preferring the lower point id. Ids are
//! the position of the point in the slice the tree was built from; callers
//! enumerate points in (laser, firing) order, making the id the grid rank.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, right: u32 },
}

#[derive(Debug)]
pub struct KdTree {
    pts: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

/// Neighbour hit: original point id and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u32,
    pub dist2: f64,
}

impl Hit {
    /// Lexicographic (dist², id) ordering used for all tie-breaking.
    #[inline]
    fn better_than(&self, other: &Hit) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.id < other.id)
    }
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> KdTree {
        let mut pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut ids: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::with_capacity(pts.len() / (LEAF_SIZE / 2) + 1);
        if !pts.is_empty() {
            let n = pts.len();
            build_rec(&mut pts, &mut ids, 0, n, &mut nodes);
        }
        KdTree { pts, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Nearest point to `query`, ties broken by lowest id.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<Hit> {
        if self.pts.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = Hit {
            id: u32::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_rec(0, &q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut Hit) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in *start as usize..*end as usize {
                    let cand = Hit {
                        id: self.ids[i],
                        dist2: dist2(&self.pts[i], q),
                    };
                    if cand.better_than(best) {
                        *best = cand;
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = q[*axis as usize] - value;
                let (near, far) = if diff < 0.0 {
                    (node + 1, *right as usize)
                } else {
                    (*right as usize, node + 1)
                };
                self.nearest_rec(near, q, best);
                // <= keeps equal-distance candidates with lower ids reachable.
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// Up to `k` nearest points within `radius`, sorted by (dist², id).
    pub fn k_nearest_within(&self, query: &Vector3<f64>, k: usize, radius: f64) -> Vec<Hit> {
        let mut out = Vec::with_capacity(k);
        if self.pts.is_empty() || k == 0 {
            return out;
        }
        let q = [query.x, query.y, query.z];
        self.knn_rec(0, &q, k, radius * radius, &mut out);
        out
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, r2: f64, heap: &mut Vec<Hit>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in *start as usize..*end as usize {
                    let cand = Hit {
                        id: self.ids[i],
                        dist2: dist2(&self.pts[i], q),
                    };
                    if cand.dist2 > r2 {
                        continue;
                    }
                    if heap.len() < k {
                        let pos = heap.partition_point(|h| h.better_than(&cand));
                        heap.insert(pos, cand);
                    } else if cand.better_than(heap.last().unwrap()) {
                        heap.pop();
                        let pos = heap.partition_point(|h| h.better_than(&cand));
                        heap.insert(pos, cand);
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = q[*axis as usize] - value;
                let (near, far) = if diff < 0.0 {
                    (node + 1, *right as usize)
                } else {
                    (*right as usize, node + 1)
                };
                self.knn_rec(near, q, k, r2, heap);
                let bound = if heap.len() == k {
                    heap.last().unwrap().dist2.min(r2)
                } else {
                    r2
                };
                if diff * diff <= bound {
                    self.knn_rec(far, q, k, r2, heap);
                }
            }
        }
    }

    /// All points within `radius`, sorted by id.
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Hit> {
        let mut out = Vec::new();
        if self.pts.is_empty() {
            return out;
        }
        let q = [query.x, query.y, query.z];
        self.radius_rec(0, &q, radius * radius, &mut out);
        out.sort_unstable_by_key(|h| h.id);
        out
    }

    fn radius_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<Hit>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in *start as usize..*end as usize {
                    let d2 = dist2(&self.pts[i], q);
                    if d2 <= r2 {
                        out.push(Hit {
                            id: self.ids[i],
                            dist2: d2,
                        });
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = q[*axis as usize] - value;
                if diff < 0.0 {
                    self.radius_rec(node + 1, q, r2, out);
                    if diff * diff <= r2 {
                        self.radius_rec(*right as usize, q, r2, out);
                    }
                } else {
                    self.radius_rec(*right as usize, q, r2, out);
                    if diff * diff <= r2 {
                        self.radius_rec(node + 1, q, r2, out);
                    }
                }
            }
        }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Recursive median-split build; returns the new node's index.
fn build_rec(pts: &mut [ [f64; 3] ], ids: &mut [u32], offset: usize, len: usize, nodes: &mut Vec<Node>) -> usize {
    let idx = nodes.len();
    if len <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + len) as u32,
        });
        return idx;
    }

    // Split on the axis with the widest extent.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts.iter().take(len) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();

    let mid = len / 2;
    // Deterministic partition: order by (coordinate, id) so duplicate
    // coordinates still split the same way every build.
    select_by(pts, ids, mid, |p, id, q, jd| {
        (p[axis], id) < (q[axis], jd)
    });
    let value = pts[mid][axis];

    nodes.push(Node::Split {
        axis: axis as u8,
        value,
        right: 0, // patched after the left subtree is built
    });
    let (lp, rp) = pts.split_at_mut(mid);
    let (li, ri) = ids.split_at_mut(mid);
    build_rec(lp, li, offset, mid, nodes);
    let right = build_rec(rp, ri, offset + mid, len - mid, nodes);
    if let Node::Split { right: r, .. } = &mut nodes[idx] {
        *r = right as u32;
    }
    idx
}

/// Quickselect on parallel arrays, keeping `pts` and `ids` in lockstep.
fn select_by(
    pts: &mut [[f64; 3]],
    ids: &mut [u32],
    k: usize,
    less: impl Fn(&[f64; 3], u32, &[f64; 3], u32) -> bool + Copy,
) {
    let (mut lo, mut hi) = (0usize, pts.len() - 1);
    while lo < hi {
        // Median-of-three pivot, moved to hi.
        let mid = lo + (hi - lo) / 2;
        if less(&pts[mid], ids[mid], &pts[lo], ids[lo]) {
            pts.swap(lo, mid);
            ids.swap(lo, mid);
        }
        if less(&pts[hi], ids[hi], &pts[lo], ids[lo]) {
            pts.swap(lo, hi);
            ids.swap(lo, hi);
        }
        if less(&pts[hi], ids[hi], &pts[mid], ids[mid]) {
            pts.swap(mid, hi);
            ids.swap(mid, hi);
        }
        pts.swap(mid, hi);
        ids.swap(mid, hi);

        let mut store = lo;
        for i in lo..hi {
            if less(&pts[i], ids[i], &pts[hi], ids[hi]) {
                pts.swap(i, store);
                ids.swap(i, store);
                store += 1;
            }
        }
        pts.swap(store, hi);
        ids.swap(store, hi);

        match store.cmp(&k) {
            std::cmp::Ordering::Equal => return,
            std::cmp::Ordering::Less => lo = store + 1,
            std::cmp::Ordering::Greater => hi = store - 1,
        }
    }
}
