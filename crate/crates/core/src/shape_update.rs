//! Shape reconstruction stage: two-stream feature sampling (image projection
//! with average pooling, 3D feature volume), the SDF training losses, and
//! the truncated-SDF fusion shape predictor that realizes the alternation
//! loop's shape update from observed depth under current pose estimates.

use crate::feature::FeatureMap;
use crate::geom::{Intrinsics, Pose};
use crate::image::Image;
use crate::par;
use crate::sdf::{GridSpec, SdfError, SdfGrid};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("mask/depth disagree: {0}")]
    InconsistentView(String),
    #[error("no view carries valid depth")]
    NoValidDepth,
    #[error("truncation {truncation} is below 2 voxels ({min})")]
    TruncationTooSmall { truncation: f64, min: f64 },
    #[error(transparent)]
    Grid(#[from] SdfError),
}

/// One calibrated observation of the object with the pose estimate under
/// which it is currently interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub intensity: Image<f64>,
    pub depth: Image<f64>,
    pub mask: Image<bool>,
    pub intrinsics: Intrinsics,
    pub pose_estimate: Pose,
}

impl ViewObservation {
    /// Validates the mask <-> finite-depth invariant.
    pub fn new(
        intensity: Image<f64>,
        depth: Image<f64>,
        mask: Image<bool>,
        intrinsics: Intrinsics,
        pose_estimate: Pose,
    ) -> Result<Self, ShapeError> {
        if !intensity.same_size(&depth) || !intensity.same_size(&mask) {
            return Err(ShapeError::InconsistentView(format!(
                "channel sizes differ: intensity {}x{}, depth {}x{}, mask {}x{}",
                intensity.width(),
                intensity.height(),
                depth.width(),
                depth.height(),
                mask.width(),
                mask.height()
            )));
        }
        for (x, y, &m) in mask.enumerate() {
            if m != depth.get(x, y).is_finite() {
                return Err(ShapeError::InconsistentView(format!(
                    "mask and depth disagree at ({x}, {y})"
                )));
            }
        }
        Ok(ViewObservation {
            intensity,
            depth,
            mask,
            intrinsics,
            pose_estimate,
        })
    }

    pub fn with_pose(&self, pose: Pose) -> ViewObservation {
        ViewObservation {
            pose_estimate: pose,
            ..self.clone()
        }
    }
}

/// Pooled image features at a query point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub image_feature: Vec<f64>,
    pub visibility_count: usize,
}

/// Projects a world point into every view and average-pools the bilinearly
/// sampled features of the views that see it (in front of the camera and
/// inside the image). Contributions are summed in sorted order, so the
/// pooled value is bit-identical under any permutation of the views; the
/// pooled vector is zero when no view sees the point.
pub fn sample_image_features(x: &Vector3<f64>, views: &[(&ViewObservation, &FeatureMap)]) -> FeatureSample {
    let channels = views.first().map(|(_, f)| f.channels()).unwrap_or(0);
    let mut contributions: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    for (obs, features) in views {
        debug_assert_eq!(features.channels(), channels);
        let cam = obs.pose_estimate.to_camera_frame(x);
        if cam.z <= 1e-9 {
            continue;
        }
        let (u, v) = obs.intrinsics.project_camera_point(&cam);
        if !features.in_bounds(u, v, 0.0) {
            continue;
        }
        contributions.push(features.sample(u, v));
    }
    let count = contributions.len();
    let mut pooled = vec![0.0; channels];
    if count > 0 {
        contributions.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for c in &contributions {
            for (p, v) in pooled.iter_mut().zip(c) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= count as f64;
        }
    }
    FeatureSample {
        image_feature: pooled,
        visibility_count: count,
    }
}

/// Dense grid of pooled image features: channels x d^3, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub channels: usize,
    pub resolution: usize,
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub data: Vec<f64>,
}

impl FeatureVolume {
    pub fn value(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        let d = self.resolution;
        self.data[c * d * d * d + x + d * (y + d * z)]
    }
}

/// Evaluates [`sample_image_features`] at every node of the grid. The
/// learned volumetric refinement is replaced by an identity pass with one
/// optional 3^3 box-smoothing sweep per channel.
pub fn build_feature_volume(
    views: &[(&ViewObservation, &FeatureMap)],
    spec: &GridSpec,
    smooth: bool,
) -> FeatureVolume {
    let d = spec.resolution;
    let channels = views.first().map(|(_, f)| f.channels()).unwrap_or(0);
    let origin = spec.origin_vec();
    let h = spec.voxel_size;
    let per_voxel: Vec<Vec<f64>> = par::map_range(d * d * d, |i| {
        let x = i % d;
        let y = (i / d) % d;
        let z = i / (d * d);
        let p = origin + Vector3::new(x as f64, y as f64, z as f64) * h;
        sample_image_features(&p, views).image_feature
    });
    let mut data = vec![0.0; channels * d * d * d];
    for (i, f) in per_voxel.iter().enumerate() {
        for (c, &v) in f.iter().enumerate() {
            data[c * d * d * d + i] = v;
        }
    }
    let mut volume = FeatureVolume {
        channels,
        resolution: d,
        origin,
        voxel_size: h,
        data,
    };
    if smooth {
        volume = box_smooth(&volume);
    }
    volume
}

/// One 3^3 box-average pass per channel; boundary voxels average over their
/// in-grid neighbors only.
fn box_smooth(v: &FeatureVolume) -> FeatureVolume {
    let d = v.resolution;
    let plane = d * d * d;
    let data = par::map_range(v.channels * plane, |i| {
        let c = i / plane;
        let rest = i % plane;
        let x = rest % d;
        let y = (rest / d) % d;
        let z = rest / (d * d);
        let mut sum = 0.0;
        let mut count = 0usize;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= d as i64 || ny >= d as i64 || nz >= d as i64 {
                        continue;
                    }
                    sum += v.value(c, nx as usize, ny as usize, nz as usize);
                    count += 1;
                }
            }
        }
        sum / count as f64
    });
    FeatureVolume { data, ..*v }
}

/// SDF supervision terms: absolute distance error over free-space samples
/// and unit-gradient-vs-normal error over surface samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfLoss {
    pub l1_term: f64,
    pub grad_term: f64,
    pub lambda_grad: f64,
    pub total: f64,
    /// Surface samples skipped because the field gradient was unavailable
    /// or shorter than 1e-12.
    pub skipped_gradient_samples: usize,
}

/// Evaluates the shape-supervision loss of a predicted grid:
/// `sum |g(x_i) - s_i|` over `space_samples` plus
/// `lambda_grad * sum ||grad g / |grad g| - n_i||` over `surface_samples`.
pub fn sdf_loss(
    pred: &SdfGrid,
    space_samples: &[(Vector3<f64>, f64)],
    surface_samples: &[(Vector3<f64>, Vector3<f64>)],
    lambda_grad: f64,
) -> SdfLoss {
    let l1_term: f64 = space_samples
        .iter()
        .map(|(x, s_gt)| (pred.sample(x) - s_gt).abs())
        .sum();
    let mut grad_term = 0.0;
    let mut skipped = 0usize;
    for (x, n_gt) in surface_samples {
        match pred.gradient(x) {
            Ok(g) if g.norm() >= 1e-12 => {
                grad_term += (g.normalize() - n_gt).norm();
            }
            _ => skipped += 1,
        }
    }
    SdfLoss {
        l1_term,
        grad_term,
        lambda_grad,
        total: l1_term + lambda_grad * grad_term,
        skipped_gradient_samples: skipped,
    }
}

/// Default truncation band in voxels for [`fuse_tsdf`].
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 4.0;

/// Truncated signed-distance fusion of observed depth maps under the views'
/// pose estimates: each voxel averages `clamp(observed_depth - voxel_depth,
/// -tau, tau)` over the views that observe it with unit weight. A view
/// observes a voxel when it projects in-bounds onto a valid depth pixel and
/// is not occluded beyond the truncation band (observed - voxel < -tau
/// carries no evidence about geometry behind the surface).
///
/// Voxels observed by no view keep +tau when some view sees free space
/// through them (the pixel ray misses the object entirely) or when they can
/// be reached from the grid boundary through unobserved space; unobserved
/// pockets fully enclosed by surface evidence lie inside the object and are
/// set to -tau, which prevents a spurious inner shell one truncation band
/// below the surface.
pub fn fuse_tsdf(
    views: &[&ViewObservation],
    spec: &GridSpec,
    truncation: f64,
) -> Result<SdfGrid, ShapeError> {
    let min_truncation = 2.0 * spec.voxel_size;
    if truncation < min_truncation {
        return Err(ShapeError::TruncationTooSmall {
            truncation,
            min: min_truncation,
        });
    }
    if !views
        .iter()
        .any(|v| v.depth.data().iter().any(|d| d.is_finite()))
    {
        return Err(ShapeError::NoValidDepth);
    }
    let d = spec.resolution;
    let origin = spec.origin_vec();
    let h = spec.voxel_size;
    #[derive(Clone, Copy, PartialEq)]
    enum Cell {
        Observed(f64),
        Free,
        Unknown,
    }
    let fused: Vec<Cell> = par::map_range(d * d * d, |i| {
        let x = i % d;
        let y = (i / d) % d;
        let z = i / (d * d);
        let p = origin + Vector3::new(x as f64, y as f64, z as f64) * h;
        let mut sum = 0.0;
        let mut weight = 0usize;
        let mut saw_free = false;
        for view in views {
            let cam = view.pose_estimate.to_camera_frame(&p);
            if cam.z <= 1e-9 {
                continue;
            }
            let (u, v) = view.intrinsics.project_camera_point(&cam);
            if u < 0.0 || v < 0.0 || u > (view.depth.width() - 1) as f64 || v > (view.depth.height() - 1) as f64 {
                continue;
            }
            // Bilinear depth over the 4 surrounding pixels, but only when
            // all are hits: interpolating across the silhouette would smear
            // surface votes laterally by up to half a pixel.
            let x0 = (u.floor() as usize).min(view.depth.width() - 2);
            let y0 = (v.floor() as usize).min(view.depth.height() - 2);
            let (a, b) = (u - x0 as f64, v - y0 as f64);
            let d00 = *view.depth.get(x0, y0);
            let d10 = *view.depth.get(x0 + 1, y0);
            let d01 = *view.depth.get(x0, y0 + 1);
            let d11 = *view.depth.get(x0 + 1, y0 + 1);
            let hits = [d00, d10, d01, d11].iter().filter(|d| d.is_finite()).count();
            if hits == 0 {
                // The rays around this projection saw no surface at all.
                saw_free = true;
                continue;
            }
            if hits < 4 {
                // Mixed silhouette neighborhood: no usable depth, but the
                // interpolated hit indicator locates the silhouette to
                // sub-pixel accuracy. Below one half the projection is
                // outside the object: free-space evidence.
                let ind = |d: f64| if d.is_finite() { 1.0 } else { 0.0 };
                let coverage = (1.0 - a) * (1.0 - b) * ind(d00)
                    + a * (1.0 - b) * ind(d10)
                    + (1.0 - a) * b * ind(d01)
                    + a * b * ind(d11);
                if coverage < 0.5 {
                    saw_free = true;
                }
                continue;
            }
            let observed = (1.0 - a) * (1.0 - b) * d00 + a * (1.0 - b) * d10 + (1.0 - a) * b * d01 + a * b * d11;
            let sdf = observed - cam.z;
            if sdf < -truncation {
                continue;
            }
            sum += sdf.min(truncation);
            weight += 1;
        }
        if weight > 0 {
            Cell::Observed(sum / weight as f64)
        } else if saw_free {
            Cell::Free
        } else {
            Cell::Unknown
        }
    });

    // Voxels occluded in every view are unknown. Group them into connected
    // components; a component that reaches the grid boundary is open space
    // (+tau); an enclosed component is decided by the surface evidence
    // around it (mean adjacent observed value negative = interior), falling
    // back to +tau when only free space surrounds it.
    let n = d * d * d;
    let mut component = vec![usize::MAX; n];
    let mut comp_touches_boundary: Vec<bool> = Vec::new();
    let mut comp_observed_sum: Vec<f64> = Vec::new();
    let mut comp_observed_count: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let neighbors = |i: usize, out: &mut Vec<usize>| {
        out.clear();
        let x = i % d;
        let y = (i / d) % d;
        let z = i / (d * d);
        if x > 0 {
            out.push(i - 1);
        }
        if x + 1 < d {
            out.push(i + 1);
        }
        if y > 0 {
            out.push(i - d);
        }
        if y + 1 < d {
            out.push(i + d);
        }
        if z > 0 {
            out.push(i - d * d);
        }
        if z + 1 < d {
            out.push(i + d * d);
        }
    };
    let on_boundary = |i: usize| {
        let x = i % d;
        let y = (i / d) % d;
        let z = i / (d * d);
        x == 0 || y == 0 || z == 0 || x == d - 1 || y == d - 1 || z == d - 1
    };
    let mut scratch = Vec::with_capacity(6);
    for seed in 0..n {
        if fused[seed] != Cell::Unknown || component[seed] != usize::MAX {
            continue;
        }
        let id = comp_touches_boundary.len();
        comp_touches_boundary.push(false);
        comp_observed_sum.push(0.0);
        comp_observed_count.push(0);
        component[seed] = id;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            if on_boundary(i) {
                comp_touches_boundary[id] = true;
            }
            neighbors(i, &mut scratch);
            for &j in &scratch {
                match fused[j] {
                    Cell::Unknown => {
                        if component[j] == usize::MAX {
                            component[j] = id;
                            stack.push(j);
                        }
                    }
                    Cell::Observed(v) => {
                        comp_observed_sum[id] += v;
                        comp_observed_count[id] += 1;
                    }
                    Cell::Free => {}
                }
            }
        }
    }
    let comp_value: Vec<f64> = (0..comp_touches_boundary.len())
        .map(|id| {
            if comp_touches_boundary[id] {
                truncation
            } else if comp_observed_count[id] > 0 && comp_observed_sum[id] < 0.0 {
                -truncation
            } else {
                truncation
            }
        })
        .collect();
    let values = fused
        .iter()
        .enumerate()
        .map(|(i, &cell)| match cell {
            Cell::Observed(v) => v,
            Cell::Free => truncation,
            Cell::Unknown => comp_value[component[i]],
        })
        .collect();
    Ok(SdfGrid::from_values(spec, values)?)
}
