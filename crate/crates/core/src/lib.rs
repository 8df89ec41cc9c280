//! Point-level dynamic object detection for motion-distorted spinning-lidar
//! scans, with a synthetic scan simulator and a precision-recall benchmark
//! harness.
//!
//! The detector labels every point of a query scan as dynamic (currently
//! moving) or static by comparing motion-compensated pointclouds against a
//! reference scan, checking flagged points against the reference scan's
//! freespace, filtering outliers on the scan's image representation, and
//! finally clustering and region-growing the surviving dynamic points.

pub mod benchmark;
pub mod cli;
pub mod compare;
pub mod error;
pub mod freespace;
pub mod geom;
pub mod imagefilter;
pub mod kdtree;
mod par;
pub mod pipeline;
pub mod scan;
pub mod segment;
pub mod simulate;
pub mod trajectory;

pub use error::{Error, Result};
pub use geom::{Pose, Twist};
pub use pipeline::{detect, DetectionResult, LogRunner, PipelineConfig};
pub use scan::{
    deskew, DeskewedScan, Label, LabelImage, LaserRig, LidarScan, Measurement, WorldPoint,
};
pub use trajectory::{transform_to_world, Trajectory};
