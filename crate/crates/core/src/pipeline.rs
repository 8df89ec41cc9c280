//! End-to-end detection pipeline and its configuration.
//!
//! `detect` runs one query scan through deskew, pointcloud comparison,
//! freespace check, box filter, clustering and region growth, asserting
//! the stage monotonicity chain. `LogRunner` streams a whole log through
//! a sliding window, reusing deskewed clouds across windows: detection of
//! scan n is emitted once scan n + forward_gap has arrived, and the tail
//! of the log is flushed without a forward pass.

use std::collections::VecDeque;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::compare::{compare_scans, estimate_normals_with_tree, CompareConfig, NormalCloud};
use crate::error::{Error, Result};
use crate::freespace::{freespace_check, ForwardSource, FreespaceConfig, FreespaceRef, FreespaceStats};
use crate::imagefilter::{box_filter, FilterConfig, FilterKernel};
use crate::kdtree::KdTree;
use crate::scan::{deskew, DeskewedScan, Label, LabelImage, LidarScan};
use crate::segment::{rbnn_cluster, region_grow, Cluster, GrowConfig};
use crate::trajectory::Trajectory;

/// Union of all stage configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub compare: CompareConfig,
    pub freespace: FreespaceConfig,
    pub filter: FilterConfig,
    pub grow: GrowConfig,
    /// Parallelize per-point work. Changes timing only, never labels.
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            compare: CompareConfig::default(),
            freespace: FreespaceConfig::default(),
            filter: FilterConfig::default(),
            grow: GrowConfig::default(),
            parallel: false,
        }
    }
}

/// Config file keys, in file order.
pub const CONFIG_KEYS: [&str; 14] = [
    "error_threshold",
    "scan_gap",
    "normal_k",
    "normal_radius",
    "k_min",
    "border_tol",
    "gn_tol",
    "gn_max_iter",
    "forward_gap",
    "score_threshold",
    "rbnn_radius",
    "min_cluster_size",
    "grow_radius",
    "parallel_cos",
];

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.compare.validate()?;
        self.grow.validate()?;
        if self.freespace.border_tol <= 0.0 {
            return Err(Error::InvalidInput("border_tol must be positive".into()));
        }
        if self.freespace.forward_gap < 1 {
            return Err(Error::InvalidInput("forward_gap must be at least 1".into()));
        }
        if self.filter.score_threshold > 12 {
            return Err(Error::InvalidInput("score_threshold must be <= 12".into()));
        }
        Ok(())
    }

    /// Set one parameter by config key.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        let as_usize = |v: f64| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "`{key}` needs a non-negative integer, got {v}"
                )));
            }
            Ok(v as usize)
        };
        match key {
            "error_threshold" => self.compare.error_threshold = value,
            "scan_gap" => self.compare.scan_gap = as_usize(value)?,
            "normal_k" => self.compare.normal_k = as_usize(value)?,
            "normal_radius" => self.compare.normal_radius = value,
            "k_min" => self.compare.k_min = as_usize(value)?,
            "border_tol" => self.freespace.border_tol = value,
            "gn_tol" => self.freespace.gn_tol = value,
            "gn_max_iter" => self.freespace.gn_max_iter = as_usize(value)?,
            "forward_gap" => self.freespace.forward_gap = as_usize(value)?,
            "score_threshold" => self.filter.score_threshold = as_usize(value)? as u32,
            "rbnn_radius" => self.grow.rbnn_radius = value,
            "min_cluster_size" => self.grow.min_cluster_size = as_usize(value)?,
            "grow_radius" => self.grow.grow_radius = value,
            "parallel_cos" => self.grow.parallel_cos = value,
            other => {
                return Err(Error::InvalidInput(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn get_param(&self, key: &str) -> Option<f64> {
        Some(match key {
            "error_threshold" => self.compare.error_threshold,
            "scan_gap" => self.compare.scan_gap as f64,
            "normal_k" => self.compare.normal_k as f64,
            "normal_radius" => self.compare.normal_radius,
            "k_min" => self.compare.k_min as f64,
            "border_tol" => self.freespace.border_tol,
            "gn_tol" => self.freespace.gn_tol,
            "gn_max_iter" => self.freespace.gn_max_iter as f64,
            "forward_gap" => self.freespace.forward_gap as f64,
            "score_threshold" => self.filter.score_threshold as f64,
            "rbnn_radius" => self.grow.rbnn_radius,
            "min_cluster_size" => self.grow.min_cluster_size as f64,
            "grow_radius" => self.grow.grow_radius,
            "parallel_cos" => self.grow.parallel_cos,
            _ => return None,
        })
    }

    /// Load a flat `key = value` config file. Unknown keys are errors;
    /// `border_tol` defaults to the loaded `error_threshold` when absent.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut cfg = PipelineConfig::default();
        let mut border_tol_set = false;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::parse(path, lineno, "expected `key = value`"));
            };
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number for `{key}`")))?;
            if key == "border_tol" {
                border_tol_set = true;
            }
            cfg.set_param(key, value)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        if !border_tol_set {
            cfg.freespace.border_tol = cfg.compare.error_threshold;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_keys(&mut w)?;
        Ok(())
    }

    pub fn write_keys(&self, w: &mut impl Write) -> Result<()> {
        for key in CONFIG_KEYS {
            writeln!(w, "{key} = {}", self.get_param(key).unwrap())?;
        }
        Ok(())
    }
}

/// Dynamic-label count after each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCounts {
    pub compare: usize,
    pub freespace: usize,
    pub filter: usize,
    /// After the minimum-cluster-size rule dissolved small clusters.
    pub cluster: usize,
    pub grow: usize,
}

/// Wall-clock per stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub deskew: f64,
    pub normals: f64,
    pub compare: f64,
    pub freespace: f64,
    pub filter: f64,
    pub segment: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub scan_index: usize,
    pub labels: LabelImage,
    pub clusters: Vec<Cluster>,
    pub counts: StageCounts,
    pub times_ms: StageTimes,
    pub freespace_stats: FreespaceStats,
    pub warnings: Vec<String>,
}

/// A scan with its deskewed cloud, reusable across sliding windows.
pub struct PreparedScan {
    pub scan: LidarScan,
    pub cloud: DeskewedScan,
    pub deskew_ms: f64,
}

impl PreparedScan {
    pub fn new(scan: LidarScan, traj: &Trajectory) -> Result<PreparedScan> {
        let start = Instant::now();
        let cloud = deskew(&scan, traj)?;
        Ok(PreparedScan {
            scan,
            cloud,
            deskew_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Run the full pipeline for one query scan. The backward reference must
/// be `scan_gap` scans earlier; the forward reference, when present,
/// `forward_gap` later (its absence demotes outside-freespace points and
/// is reported as a warning).
pub fn detect(
    query: &LidarScan,
    backward: &LidarScan,
    forward: Option<&LidarScan>,
    traj: &Trajectory,
    cfg: &PipelineConfig,
) -> Result<DetectionResult> {
    let query = PreparedScan::new(query.clone(), traj)?;
    let backward = PreparedScan::new(backward.clone(), traj)?;
    let forward = forward
        .map(|f| PreparedScan::new(f.clone(), traj))
        .transpose()?;
    detect_prepared(&query, &backward, forward.as_ref(), traj, cfg)
}

/// Detect on already-deskewed scans.
pub fn detect_prepared(
    query: &PreparedScan,
    backward: &PreparedScan,
    forward: Option<&PreparedScan>,
    traj: &Trajectory,
    cfg: &PipelineConfig,
) -> Result<DetectionResult> {
    cfg.validate()?;
    let q = query.scan.scan_index;
    if backward.scan.scan_index + cfg.compare.scan_gap != q {
        return Err(Error::MissingData(format!(
            "backward reference must be scan {} (got {})",
            q as i64 - cfg.compare.scan_gap as i64,
            backward.scan.scan_index
        )));
    }
    if let Some(f) = forward {
        if f.scan.scan_index != q + cfg.freespace.forward_gap {
            return Err(Error::MissingData(format!(
                "forward reference must be scan {} (got {})",
                q + cfg.freespace.forward_gap,
                f.scan.scan_index
            )));
        }
    }
    let total_start = Instant::now();
    let mut times = StageTimes {
        deskew: query.deskew_ms,
        ..Default::default()
    };
    let mut warnings = Vec::new();

    // Surface normals over the query cloud.
    let t = Instant::now();
    let query_tree = KdTree::build(&query.cloud.positions());
    let normals = estimate_normals_with_tree(
        &query.cloud.points,
        &query.cloud.sensor_positions,
        &query_tree,
        &cfg.compare,
        cfg.parallel,
    );
    times.normals = ms(t);

    // Stage 2: pointcloud comparison.
    let t = Instant::now();
    let ref_tree = KdTree::build(&backward.cloud.positions());
    let compared = compare_scans(
        &query.cloud,
        &normals,
        &backward.cloud,
        &ref_tree,
        &cfg.compare,
        cfg.parallel,
    )?;
    times.compare = ms(t);

    // Stage 3: freespace check, backward then forward.
    let t = Instant::now();
    let backward_ref = FreespaceRef::new(&backward.scan, &backward.cloud, traj)?;
    let forward_src = match forward {
        Some(f) => ForwardSource::Scan(&f.scan, &f.cloud),
        None => ForwardSource::Missing,
    };
    let (checked, fs_stats, mut fs_warnings) = freespace_check(
        &compared,
        &query.cloud,
        &normals,
        &backward_ref,
        forward_src,
        traj,
        &cfg.freespace,
        cfg.parallel,
    )?;
    warnings.append(&mut fs_warnings);
    times.freespace = ms(t);

    // Stage 4: image box filter.
    let t = Instant::now();
    let filtered = box_filter(&checked, &FilterKernel::standard(), &cfg.filter);
    times.filter = ms(t);

    // Stage 5: clustering and region growth.
    let t = Instant::now();
    let (clusters, grown, after_dissolve) =
        segment_stage(&filtered, &query.cloud, &normals, &query_tree, &cfg.grow);
    times.segment = ms(t);
    times.total = ms(total_start) + times.deskew;

    let counts = StageCounts {
        compare: compared.dynamic_count(),
        freespace: checked.dynamic_count(),
        filter: filtered.dynamic_count(),
        cluster: after_dissolve.dynamic_count(),
        grow: grown.dynamic_count(),
    };
    assert_stage_monotonicity(&compared, &checked, &filtered, &after_dissolve, &grown);

    Ok(DetectionResult {
        scan_index: q,
        labels: grown,
        clusters,
        counts,
        times_ms: times,
        freespace_stats: fs_stats,
        warnings,
    })
}

fn segment_stage(
    filtered: &LabelImage,
    cloud: &DeskewedScan,
    normals: &NormalCloud,
    query_tree: &KdTree,
    cfg: &GrowConfig,
) -> (Vec<Cluster>, LabelImage, LabelImage) {
    let mut dynamic_points = Vec::new();
    for (l, c) in filtered.dynamic_cells() {
        let idx = cloud.slot_index[l * cloud.cols + c].expect("dynamic cell has a point") as usize;
        dynamic_points.push((idx, cloud.points[idx].position));
    }
    let (seeds, dissolved) = rbnn_cluster(&dynamic_points, cfg);
    let mut after_dissolve = filtered.clone();
    for k in dissolved {
        let p = &cloud.points[dynamic_points[k].0];
        after_dissolve.set(p.laser as usize, p.firing as usize, Label::Static);
    }
    let seed_clusters: Vec<Vec<usize>> = seeds
        .iter()
        .map(|m| m.iter().map(|&k| dynamic_points[k].0).collect())
        .collect();
    let (clusters, grown) = region_grow(
        &seed_clusters,
        cloud,
        normals,
        &after_dissolve,
        query_tree,
        cfg,
    );
    (clusters, grown, after_dissolve)
}

/// Hard assertion of the per-scan inclusion chain: the comparison set
/// contains the freespace set, which contains the filtered set, which
/// contains the post-dissolution set; growth only ever adds to the
/// post-dissolution set.
fn assert_stage_monotonicity(
    compared: &LabelImage,
    checked: &LabelImage,
    filtered: &LabelImage,
    after_dissolve: &LabelImage,
    grown: &LabelImage,
) {
    let a = compared.dynamic_mask();
    let b = checked.dynamic_mask();
    let c = filtered.dynamic_mask();
    let d = after_dissolve.dynamic_mask();
    let e = grown.dynamic_mask();
    for i in 0..a.len() {
        assert!(a[i] || !b[i], "freespace added a dynamic label at slot {i}");
        assert!(b[i] || !c[i], "box filter added a dynamic label at slot {i}");
        assert!(c[i] || !d[i], "cluster dissolution added a dynamic label at slot {i}");
        assert!(e[i] || !d[i], "region growth dropped a dynamic label at slot {i}");
    }
}

/// Streaming detection over a log of consecutive scans.
pub struct LogRunner<'a> {
    traj: &'a Trajectory,
    cfg: PipelineConfig,
    window: VecDeque<PreparedScan>,
    emitted_through: Option<usize>,
}

impl<'a> LogRunner<'a> {
    pub fn new(traj: &'a Trajectory, cfg: PipelineConfig) -> Result<LogRunner<'a>> {
        cfg.validate()?;
        Ok(LogRunner {
            traj,
            cfg,
            window: VecDeque::new(),
            emitted_through: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn find(&self, index: usize) -> Option<&PreparedScan> {
        self.window.iter().find(|p| p.scan.scan_index == index)
    }

    /// Feed the next scan (indices must be consecutive). Returns the
    /// detection for scan `index - forward_gap` once it is computable.
    pub fn push(&mut self, scan: LidarScan) -> Result<Option<DetectionResult>> {
        if let Some(back) = self.window.back() {
            if scan.scan_index != back.scan.scan_index + 1 {
                return Err(Error::MissingData(format!(
                    "scans must arrive consecutively: got {} after {}",
                    scan.scan_index,
                    back.scan.scan_index
                )));
            }
        }
        let prepared = PreparedScan::new(scan, self.traj)?;
        self.window.push_back(prepared);
        let capacity = self.cfg.compare.scan_gap + self.cfg.freespace.forward_gap + 1;
        while self.window.len() > capacity {
            self.window.pop_front();
        }
        let newest = self.window.back().unwrap().scan.scan_index;
        let fgap = self.cfg.freespace.forward_gap;
        let gap = self.cfg.compare.scan_gap;
        if newest < fgap {
            return Ok(None);
        }
        let query_idx = newest - fgap;
        if query_idx < gap {
            return Ok(None);
        }
        let (Some(query), Some(backward)) = (self.find(query_idx), self.find(query_idx - gap))
        else {
            return Ok(None);
        };
        let forward = self.find(query_idx + fgap);
        let result = detect_prepared(query, backward, forward, self.traj, &self.cfg)?;
        self.emitted_through = Some(query_idx);
        Ok(Some(result))
    }

    /// Flush the tail of the log: queries newer than the last emitted one
    /// run without a forward reference.
    pub fn finish(&mut self) -> Result<Vec<DetectionResult>> {
        let mut out = Vec::new();
        let Some(back) = self.window.back() else {
            return Ok(out);
        };
        let newest = back.scan.scan_index;
        let gap = self.cfg.compare.scan_gap;
        let first = self.emitted_through.map(|e| e + 1).unwrap_or(gap);
        for query_idx in first..=newest {
            if query_idx < gap {
                continue;
            }
            let (Some(query), Some(backward)) = (self.find(query_idx), self.find(query_idx - gap))
            else {
                continue;
            };
            let forward = self.find(query_idx + self.cfg.freespace.forward_gap);
            out.push(detect_prepared(query, backward, forward, self.traj, &self.cfg)?);
        }
        self.window.clear();
        self.emitted_through = None;
        Ok(out)
    }
}

/// Text run manifest: the config snapshot plus per-scan timings, counts
/// and warnings.
pub fn write_manifest(
    path: impl AsRef<Path>,
    cfg: &PipelineConfig,
    results: &[DetectionResult],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# detection run manifest")?;
    writeln!(w, "[config]")?;
    cfg.write_keys(&mut w)?;
    writeln!(w, "parallel = {}", cfg.parallel)?;
    writeln!(w, "[scans]")?;
    for r in results {
        writeln!(
            w,
            "scan {} dynamic: compare={} freespace={} filter={} cluster={} grow={} clusters={} \
             ms: deskew={:.2} normals={:.2} compare={:.2} freespace={:.2} filter={:.2} segment={:.2} total={:.2}",
            r.scan_index,
            r.counts.compare,
            r.counts.freespace,
            r.counts.filter,
            r.counts.cluster,
            r.counts.grow,
            r.clusters.len(),
            r.times_ms.deskew,
            r.times_ms.normals,
            r.times_ms.compare,
            r.times_ms.freespace,
            r.times_ms.filter,
            r.times_ms.segment,
            r.times_ms.total,
        )?;
        for warning in &r.warnings {
            writeln!(w, "warning scan {}: {}", r.scan_index, warning)?;
        }
    }
    Ok(())
}
