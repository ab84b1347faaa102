//! Joint shape and pose optimization for few-view object reconstruction.
//!
//! The pipeline reconstructs an object observed by a handful of calibrated
//! views with unreliable camera poses:
//!
//! 1. [`pose_init`] recovers initial camera poses from dense scene-coordinate
//!    maps via RANSAC PnP.
//! 2. [`shape_update`] rebuilds a signed-distance grid from the observed
//!    depth under the current pose estimates (truncated SDF fusion).
//! 3. [`render`] sphere-traces the grid into depth/mask images and visible
//!    surface points.
//! 4. [`pose_refine`] realigns each view with a one-step Levenberg–Marquardt
//!    update on dense feature residuals between the rendered and observed
//!    views.
//! 5. [`joint`] alternates shape and pose updates on a fixed schedule.
//!
//! [`scenes`] generates fully synthetic ground-truth scenes for end-to-end
//! validation and [`metrics`] implements the reconstruction/pose metrics
//! (IoU, Chamfer-L1, normal consistency, F-score, pixel error) plus
//! similarity alignment.
//!
//! With the default `parallel` feature the per-pixel and per-voxel inner
//! loops run on rayon; results are independent of the thread schedule.

pub mod feature;
pub mod formats;
pub mod geom;
pub mod image;
pub mod joint;
mod mc_tables;
pub mod mesh;
pub mod metrics;
mod par;
pub mod pose_init;
pub mod pose_refine;
pub mod render;
pub mod scenes;
pub mod sdf;
pub mod shape_update;
