//! Sphere-tracing renderer over a discretized SDF, producing per-view depth
//! maps, object masks, and the visible 3D point set consumed by pose
//! refinement, plus Lambertian shading from field gradients.

use crate::geom::{Intrinsics, Pose};
use crate::image::Image;
use crate::par;
use crate::sdf::SdfGrid;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("camera center is inside the surface (sdf = {0})")]
    CameraInsideSurface(f64),
    #[error("depth images disagree in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Sphere-tracing constants. The step is scaled by `safety_factor`, a hit is
/// declared below `surface_eps_factor * voxel_size`, and rays give up after
/// `max_steps` samples or on leaving the grid box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub safety_factor: f64,
    pub surface_eps_factor: f64,
    pub max_steps: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            safety_factor: 0.9,
            surface_eps_factor: 0.25,
            max_steps: 128,
        }
    }
}

/// A converged pixel: integer pixel coordinates, the world-space hit point,
/// and its camera-frame z depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub u: usize,
    pub v: usize,
    pub world: Vector3<f64>,
    pub depth: f64,
}

/// Depth is `f64::INFINITY` on misses; `mask` is true exactly where depth is
/// finite; `points` back-project to their stored world position through the
/// render pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub depth: Image<f64>,
    pub mask: Image<bool>,
    pub points: Vec<SurfacePoint>,
}

fn ray_box_range(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (a, b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t1 < t0 {
        None
    } else {
        Some((t0, t1))
    }
}

/// Newton polish of a near-surface ray parameter: steps by the sampled
/// field value, which is below eps at entry, so each move is bounded and
/// the root is approached from wherever the march stopped.
fn polish_hit(grid: &SdfGrid, origin: &Vector3<f64>, dir: &Vector3<f64>, mut t: f64, eps: f64) -> f64 {
    for _ in 0..3 {
        let s = grid.sample(&(origin + dir * t));
        if s.abs() > 2.0 * eps {
            break;
        }
        t += s;
        if s.abs() < 1e-3 * eps {
            break;
        }
    }
    t
}

/// Marches one world-space ray. Returns the Euclidean ray parameter of the
/// hit, refined by one secant step between the last two samples.
fn trace_ray(
    grid: &SdfGrid,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cfg: &RenderConfig,
) -> Option<f64> {
    let (bmin, bmax) = grid.bounds();
    let (enter, exit) = ray_box_range(origin, dir, &bmin, &bmax)?;
    let eps = cfg.surface_eps_factor * grid.voxel_size();
    let mut t = enter.max(0.0);
    let mut prev: Option<(f64, f64)> = None;
    for _ in 0..cfg.max_steps {
        let p = origin + dir * t;
        let s = grid.sample(&p);
        if s < 0.0 {
            // Overshot the surface: one secant step between the bracketing
            // samples interpolates the zero crossing.
            if let Some((tp, sp)) = prev {
                if sp > 0.0 && (sp - s) > 1e-30 {
                    return Some(polish_hit(grid, origin, dir, tp + (t - tp) * sp / (sp - s), eps));
                }
            }
            return Some(t);
        }
        if s.abs() < eps {
            // Stopping here would leave the hit up to eps in front of the
            // surface; that bias would dilate everything downstream that
            // re-fuses rendered depth. Polish the root before returning.
            return Some(polish_hit(grid, origin, dir, t, eps));
        }
        prev = Some((t, s));
        t += cfg.safety_factor * s;
        if t > exit + grid.voxel_size() {
            return None;
        }
    }
    None
}

/// Renders the grid from a camera-to-world pose: one ray per integer pixel
/// center, sphere-traced through the field. Rows run in parallel; the output
/// is independent of the schedule.
pub fn render(
    grid: &SdfGrid,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<RenderOutput, RenderError> {
    let cam_sdf = grid.sample(pose.center());
    if cam_sdf < 0.0 {
        return Err(RenderError::CameraInsideSurface(cam_sdf));
    }
    let origin = *pose.center();
    let (w, h) = (k.width, k.height);

    let rows: Vec<Vec<f64>> = par::map_range(h, |v| {
        let mut row = Vec::with_capacity(w);
        for u in 0..w {
            let dir_cam = k.unproject_dir(u as f64, v as f64);
            let z_per_t = 1.0 / dir_cam.norm();
            let dir_world = pose.rotation().apply(&dir_cam) * z_per_t;
            let depth = trace_ray(grid, &origin, &dir_world, cfg)
                .map(|t| t * z_per_t)
                .unwrap_or(f64::INFINITY);
            row.push(depth);
        }
        row
    });

    let depth = Image::from_rows(w, rows);
    let mask = depth.map(|d| d.is_finite());
    let mut points = Vec::new();
    for (u, v, &d) in depth.enumerate() {
        if d.is_finite() {
            let world = pose.transform_point(&(k.unproject_dir(u as f64, v as f64) * d));
            points.push(SurfacePoint { u, v, world, depth: d });
        }
    }
    Ok(RenderOutput { depth, mask, points })
}

/// Mean absolute depth difference against a reference depth image, over
/// pixels where both maps registered a hit. Returns 0 when no pixel
/// qualifies.
pub fn render_depth_consistency(
    grid: &SdfGrid,
    pose: &Pose,
    k: &Intrinsics,
    gt_depth: &Image<f64>,
    cfg: &RenderConfig,
) -> Result<f64, RenderError> {
    if gt_depth.width() != k.width || gt_depth.height() != k.height {
        return Err(RenderError::DimensionMismatch(
            gt_depth.width(),
            gt_depth.height(),
            k.width,
            k.height,
        ));
    }
    let out = render(grid, pose, k, cfg)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y, &d) in out.depth.enumerate() {
        let g = *gt_depth.get(x, y);
        if d.is_finite() && g.is_finite() {
            sum += (d - g).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Lambertian shading of a render: ambient plus diffuse from the normalized
/// field gradient at each hit point, lit by a fixed world-space direction.
/// Misses shade to 0.
pub fn shade_lambertian(grid: &SdfGrid, out: &RenderOutput, light_dir: &Vector3<f64>) -> Image<f64> {
    const AMBIENT: f64 = 0.15;
    let light = light_dir.normalize();
    let mut img = Image::new(out.depth.width(), out.depth.height(), 0.0);
    for p in &out.points {
        let shade = match grid.gradient(&p.world) {
            Ok(g) if g.norm() > 1e-12 => {
                AMBIENT + (1.0 - AMBIENT) * g.normalize().dot(&light).max(0.0)
            }
            _ => AMBIENT,
        };
        img.set(p.u, p.v, shade.clamp(0.0, 1.0));
    }
    img
}
