//! Pose initialization from dense scene-coordinate maps via RANSAC PnP.
//!
//! A scene-coordinate map assigns each pixel the 3D world position of the
//! surface point it observes. Poses are recovered by robustly matching
//! pixels against their coordinates: minimal DLT solves inside a RANSAC
//! loop, then Gauss-Newton reprojection refinement on the consensus set.
//!
//! The learned coordinate predictor is abstracted behind
//! [`SceneCoordPredictor`]; the provided implementations produce exact
//! back-projected coordinates, Gaussian-corrupted ones, and maps with a
//! controlled fraction of uniform outliers.

use crate::geom::{back_project, skew, Intrinsics, Pose, Rotation};
use crate::image::Image;
use crate::par;
use crate::scenes::Scene;
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseInitError {
    #[error("dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("{got} valid correspondences, at least {needed} required")]
    TooFewCorrespondences { got: usize, needed: usize },
    #[error("no consensus: best inlier ratio {0:.3} is below 0.1")]
    NoConsensus(f64),
    #[error("pose initialization failed for view {view}: {source}")]
    ViewFailed {
        view: usize,
        #[source]
        source: Box<PoseInitError>,
    },
}

/// Dense per-pixel 3D world coordinates with a validity weight per pixel.
/// Consumers ignore coordinates whose weight is false.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCoordMap {
    width: usize,
    height: usize,
    coords: Vec<Vector3<f64>>,
    weights: Vec<bool>,
}

impl SceneCoordMap {
    pub fn from_parts(width: usize, height: usize, coords: Vec<Vector3<f64>>, weights: Vec<bool>) -> Self {
        assert_eq!(coords.len(), width * height);
        assert_eq!(weights.len(), width * height);
        SceneCoordMap { width, height, coords, weights }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coord(&self, x: usize, y: usize) -> &Vector3<f64> {
        &self.coords[y * self.width + x]
    }

    pub fn weight(&self, x: usize, y: usize) -> bool {
        self.weights[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w).count()
    }

    /// Valid pixels as (u, v, world coordinate), row-major.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &Vector3<f64>)> {
        self.coords
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter_map(move |(i, (c, &w))| w.then_some((i % self.width, i / self.width, c)))
    }
}

/// A 2D-3D correspondence: pixel position and world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub u: f64,
    pub v: f64,
    pub world: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_px_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 500,
            inlier_px_threshold: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPResult {
    pub pose: Pose,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub reproj_rmse: f64,
}

/// Scene-coordinate loss: the summed Euclidean distance, over valid pixels,
/// between predicted coordinates and the ground-truth back-projection
/// `d * R * K^-1 (u, v, 1) + t`.
pub fn scene_coord_loss(
    pred: &SceneCoordMap,
    gt_depth: &Image<f64>,
    gt_pose: &Pose,
    k: &Intrinsics,
) -> Result<f64, PoseInitError> {
    if pred.width() != gt_depth.width() || pred.height() != gt_depth.height() {
        return Err(PoseInitError::DimensionMismatch(format!(
            "prediction {}x{} vs depth {}x{}",
            pred.width(),
            pred.height(),
            gt_depth.width(),
            gt_depth.height()
        )));
    }
    let mut sum = 0.0;
    for (u, v, c) in pred.iter_valid() {
        let d = *gt_depth.get(u, v);
        if !d.is_finite() || d <= 0.0 {
            continue;
        }
        let gt = back_project(u as f64, v as f64, d, gt_pose, k).expect("positive depth");
        sum += (c - gt).norm();
    }
    Ok(sum)
}

/// World-to-camera rigid transform used internally by the solvers.
#[derive(Debug, Clone, Copy)]
struct WorldToCamera {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl WorldToCamera {
    fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    fn to_camera_to_world(self) -> Pose {
        let rot = Rotation::orthonormalized(self.r).expect("rotation from solver");
        let rot_inv = rot.inverse();
        Pose::new(rot_inv, -rot_inv.apply(&self.t))
    }
}

fn reprojection_error(wc: &WorldToCamera, c: &Correspondence, k: &Intrinsics) -> Option<f64> {
    let cam = wc.transform(&c.world);
    if cam.z <= 1e-9 {
        return None;
    }
    let (u, v) = k.project_camera_point(&cam);
    Some(((u - c.u).powi(2) + (v - c.v).powi(2)).sqrt())
}

/// Gauss-Newton refinement of a world-to-camera pose on pixel reprojection
/// error: at most `max_iters` iterations, stopping when the update norm
/// drops below 1e-10.
fn refine_gauss_newton(
    mut wc: WorldToCamera,
    corr: &[Correspondence],
    k: &Intrinsics,
    max_iters: usize,
) -> WorldToCamera {
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut used = 0usize;
        for c in corr {
            let cam = wc.transform(&c.world);
            if cam.z <= 1e-9 {
                continue;
            }
            let (u, v) = k.project_camera_point(&cam);
            let r = nalgebra::Vector2::new(u - c.u, v - c.v);
            let iz = 1.0 / cam.z;
            let proj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * cam.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * cam.y * iz * iz,
            );
            let mut warp = nalgebra::Matrix3x6::zeros();
            warp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&cam)));
            warp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = proj * warp;
            h += j.transpose() * j;
            g += j.transpose() * r;
            used += 1;
        }
        if used < 3 {
            break;
        }
        // Tiny diagonal loading keeps the solve well-posed on flat problems.
        let damped = h + Matrix6::identity() * (1e-12 * (h.trace() / 6.0).max(1e-12));
        let Some(chol) = damped.cholesky() else { break };
        let delta = chol.solve(&(-g));
        let dc = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let r_delta = Rotation::from_axis_angle(&dc);
        wc = WorldToCamera {
            r: r_delta.matrix() * wc.r,
            t: r_delta.matrix() * wc.t + dt,
        };
        if delta.norm() < 1e-10 {
            break;
        }
    }
    wc
}

fn dlt(corr: &[Correspondence], k: &Intrinsics) -> Result<WorldToCamera, PoseInitError> {
    let n = corr.len();
    if n < 6 {
        return Err(PoseInitError::DegenerateConfiguration(format!(
            "{n} correspondences, DLT needs at least 6"
        )));
    }
    // Condition the 3D points: zero centroid, mean norm sqrt(3).
    let centroid = corr.iter().fold(Vector3::zeros(), |acc, c| acc + c.world) / n as f64;
    let mean_dist = corr.iter().map(|c| (c.world - centroid).norm()).sum::<f64>() / n as f64;
    if mean_dist < 1e-12 {
        return Err(PoseInitError::DegenerateConfiguration("coincident 3D points".into()));
    }
    let s3 = 3.0f64.sqrt() / mean_dist;

    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corr.iter().enumerate() {
        let p = (c.world - centroid) * s3;
        let x = (c.u - k.cx) / k.fx;
        let y = (c.v - k.cy) / k.fy;
        let r0 = 2 * i;
        m[(r0, 0)] = p.x;
        m[(r0, 1)] = p.y;
        m[(r0, 2)] = p.z;
        m[(r0, 3)] = 1.0;
        m[(r0, 8)] = -x * p.x;
        m[(r0, 9)] = -x * p.y;
        m[(r0, 10)] = -x * p.z;
        m[(r0, 11)] = -x;
        let r1 = r0 + 1;
        m[(r1, 4)] = p.x;
        m[(r1, 5)] = p.y;
        m[(r1, 6)] = p.z;
        m[(r1, 7)] = 1.0;
        m[(r1, 8)] = -y * p.x;
        m[(r1, 9)] = -y * p.y;
        m[(r1, 10)] = -y * p.z;
        m[(r1, 11)] = -y;
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sv = &svd.singular_values;
    // A well-posed DLT has exactly one (near-)zero singular value.
    if sv[10] < 1e-10 * sv[0].max(1e-300) {
        return Err(PoseInitError::DegenerateConfiguration(
            "rank-deficient DLT system (coplanar or collinear points)".into(),
        ));
    }
    let p_row = v_t.row(11);
    // P' maps normalized 3D points; fold the normalization back in.
    let a_n = Matrix3::new(
        p_row[0], p_row[1], p_row[2], p_row[4], p_row[5], p_row[6], p_row[8], p_row[9], p_row[10],
    );
    let mut a = a_n * s3;
    let mut b = Vector3::new(p_row[3], p_row[7], p_row[11]) - a_n * (centroid * s3);

    // Cheirality: most points should land in front of the camera.
    let front = corr
        .iter()
        .filter(|c| (a.row(2) * c.world)[0] + b.z > 0.0)
        .count();
    if front * 2 < n {
        a = -a;
        b = -b;
    }
    let svd_a = a.svd(true, true);
    let u = svd_a.u.expect("3x3 svd u");
    let v_t3 = svd_a.v_t.expect("3x3 svd v_t");
    let det_sign = (u * v_t3).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det_sign)) * v_t3;
    let s = (svd_a.singular_values[0] + svd_a.singular_values[1] + det_sign * svd_a.singular_values[2]) / 3.0;
    if s.abs() < 1e-15 {
        return Err(PoseInitError::DegenerateConfiguration("zero-scale projection".into()));
    }
    Ok(WorldToCamera { r, t: b / s })
}

/// Minimal PnP solve: DLT for the 3x4 projection, SVD projection of the
/// rotation onto SO(3), then up to 10 Gauss-Newton reprojection iterations.
/// Returns a camera-to-world pose.
pub fn pnp_minimal(corr: &[Correspondence], k: &Intrinsics) -> Result<Pose, PoseInitError> {
    let wc = dlt(corr, k)?;
    let wc = refine_gauss_newton(wc, corr, k, 10);
    Ok(wc.to_camera_to_world())
}

/// RANSAC PnP over a scene-coordinate map: minimal samples score inlier
/// counts by reprojection, the best hypothesis is refined on its consensus
/// set. Deterministic for a given seed; hypotheses are evaluated in
/// parallel from pre-drawn sample sets.
pub fn ransac_pnp(
    map: &SceneCoordMap,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PnPResult, PoseInitError> {
    let candidates: Vec<Correspondence> = map
        .iter_valid()
        .map(|(u, v, w)| Correspondence {
            u: u as f64,
            v: v as f64,
            world: *w,
        })
        .collect();
    let n = candidates.len();
    if n < 6 {
        return Err(PoseInitError::TooFewCorrespondences { got: n, needed: 6 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<[usize; 6]> = (0..cfg.iterations)
        .map(|_| {
            let mut pick = [0usize; 6];
            let mut chosen = 0;
            while chosen < 6 {
                let idx = rng.random_range(0..n);
                if !pick[..chosen].contains(&idx) {
                    pick[chosen] = idx;
                    chosen += 1;
                }
            }
            pick
        })
        .collect();

    let scores: Vec<Option<(usize, WorldToCamera)>> = par::map_slice(&samples, |sample| {
        let minimal: Vec<Correspondence> = sample.iter().map(|&i| candidates[i]).collect();
        let wc = dlt(&minimal, k).ok()?;
        let wc = refine_gauss_newton(wc, &minimal, k, 3);
        let inliers = candidates
            .iter()
            .filter(|c| matches!(reprojection_error(&wc, c, k), Some(e) if e < cfg.inlier_px_threshold))
            .count();
        Some((inliers, wc))
    });

    let mut best: Option<(usize, WorldToCamera)> = None;
    for entry in scores.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some((count, _)) => entry.0 > *count,
        };
        if better {
            best = Some(entry);
        }
    }
    let Some((best_count, best_wc)) = best else {
        return Err(PoseInitError::NoConsensus(0.0));
    };
    if (best_count as f64) < 0.1 * n as f64 {
        return Err(PoseInitError::NoConsensus(best_count as f64 / n as f64));
    }

    // Final refinement on the consensus set.
    let inliers: Vec<Correspondence> = candidates
        .iter()
        .filter(|c| matches!(reprojection_error(&best_wc, c, k), Some(e) if e < cfg.inlier_px_threshold))
        .copied()
        .collect();
    let refined = refine_gauss_newton(best_wc, &inliers, k, 10);

    let mut inlier_count = 0usize;
    let mut sq_sum = 0.0;
    for c in &candidates {
        if let Some(e) = reprojection_error(&refined, c, k) {
            if e < cfg.inlier_px_threshold {
                inlier_count += 1;
                sq_sum += e * e;
            }
        }
    }
    if inlier_count == 0 {
        return Err(PoseInitError::NoConsensus(0.0));
    }
    Ok(PnPResult {
        pose: refined.to_camera_to_world(),
        inlier_count,
        inlier_ratio: inlier_count as f64 / n as f64,
        reproj_rmse: (sq_sum / inlier_count as f64).sqrt(),
    })
}

/// Produces one scene-coordinate map per view; invoked once per scene with
/// all views so implementations may share information across views.
pub trait SceneCoordPredictor {
    fn predict(&self, scene: &Scene) -> Vec<SceneCoordMap>;
}

/// Exact coordinates: the ground-truth back-projection of every hit pixel.
pub struct OracleCoordPredictor;

fn oracle_map(scene: &Scene, view: usize) -> SceneCoordMap {
    let obs = &scene.views[view];
    let k = &scene.intrinsics;
    let (w, h) = (obs.depth.width(), obs.depth.height());
    let mut coords = vec![Vector3::zeros(); w * h];
    let mut weights = vec![false; w * h];
    for (x, y, &d) in obs.depth.enumerate() {
        if d.is_finite() && d > 0.0 {
            coords[y * w + x] =
                back_project(x as f64, y as f64, d, &obs.pose_estimate, k).expect("positive depth");
            weights[y * w + x] = true;
        }
    }
    SceneCoordMap::from_parts(w, h, coords, weights)
}

impl SceneCoordPredictor for OracleCoordPredictor {
    fn predict(&self, scene: &Scene) -> Vec<SceneCoordMap> {
        (0..scene.views.len()).map(|i| oracle_map(scene, i)).collect()
    }
}

/// Oracle coordinates corrupted by isotropic Gaussian noise of standard
/// deviation `sigma` (world units) at every valid pixel.
pub struct NoisyCoordPredictor {
    pub sigma: f64,
    pub seed: u64,
}

impl SceneCoordPredictor for NoisyCoordPredictor {
    fn predict(&self, scene: &Scene) -> Vec<SceneCoordMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..scene.views.len())
            .map(|i| {
                let mut map = oracle_map(scene, i);
                for idx in 0..map.coords.len() {
                    if map.weights[idx] {
                        let n = Vector3::new(
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                        );
                        map.coords[idx] += n * self.sigma;
                    }
                }
                map
            })
            .collect()
    }
}

/// Oracle coordinates with a fraction of valid pixels replaced by uniform
/// samples over the scene's grid bounding box.
pub struct OutlierCoordPredictor {
    pub fraction: f64,
    pub seed: u64,
}

impl SceneCoordPredictor for OutlierCoordPredictor {
    fn predict(&self, scene: &Scene) -> Vec<SceneCoordMap> {
        let (bmin, bmax) = scene.gt_grid.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..scene.views.len())
            .map(|i| {
                let mut map = oracle_map(scene, i);
                for idx in 0..map.coords.len() {
                    if map.weights[idx] && rng.random::<f64>() < self.fraction {
                        map.coords[idx] = Vector3::new(
                            rng.random_range(bmin.x..bmax.x),
                            rng.random_range(bmin.y..bmax.y),
                            rng.random_range(bmin.z..bmax.z),
                        );
                    }
                }
                map
            })
            .collect()
    }
}

/// Runs the predictor once over all views, then RANSAC PnP per view.
/// Per-view RANSAC seeds derive deterministically from `cfg.seed`.
pub fn init_poses(
    scene: &Scene,
    predictor: &dyn SceneCoordPredictor,
    cfg: &RansacConfig,
) -> Result<Vec<PnPResult>, PoseInitError> {
    let maps = predictor.predict(scene);
    let mut results = Vec::with_capacity(maps.len());
    for (view, map) in maps.iter().enumerate() {
        let view_cfg = RansacConfig {
            seed: cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(view as u64),
            ..*cfg
        };
        let result = ransac_pnp(map, &scene.intrinsics, &view_cfg).map_err(|e| {
            PoseInitError::ViewFailed {
                view,
                source: Box::new(e),
            }
        })?;
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_map, project, Twist};
    use rand::Rng;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(70.0, 70.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        exp_map(&Twist::new(
            axis * rng.random_range(0.0..1.5),
            Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-2.0..-1.4),
            ),
        ))
    }

    /// World points sampled in front of the camera with their projections.
    fn synthesize(pose: &Pose, k: &Intrinsics, n: usize, rng: &mut ChaCha8Rng) -> Vec<Correspondence> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let cam = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.8..2.2),
            );
            let world = pose.transform_point(&cam);
            let Ok((u, v, _)) = project(&world, pose, k) else { continue };
            if u < 0.0 || v < 0.0 || u > (k.width - 1) as f64 || v > (k.height - 1) as f64 {
                continue;
            }
            out.push(Correspondence { u, v, world });
        }
        out
    }

    /// Consistent scene-coordinate map for a pose, with optional corruption.
    fn synthetic_map(
        pose: &Pose,
        k: &Intrinsics,
        rng: &mut ChaCha8Rng,
        outlier_fraction: f64,
        noise_px_sigma: f64,
    ) -> SceneCoordMap {
        let (w, h) = (k.width, k.height);
        let mut coords = vec![Vector3::zeros(); w * h];
        let mut weights = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let depth = rng.random_range(1.0..2.0);
                let mut world = back_project(x as f64, y as f64, depth, pose, k).unwrap();
                if rng.random::<f64>() < outlier_fraction {
                    world = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                } else if noise_px_sigma > 0.0 {
                    // Pixel-scale noise expressed in world units at depth ~1.5.
                    let scale = noise_px_sigma * 1.5 / k.fx;
                    world += Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * scale;
                }
                coords[y * w + x] = world;
                weights[y * w + x] = true;
            }
        }
        SceneCoordMap::from_parts(w, h, coords, weights)
    }

    #[test]
    fn loss_of_exact_back_projection_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng);
        let k = test_intrinsics();
        let map = synthetic_map(&pose, &k, &mut rng.clone(), 0.0, 0.0);
        let mut depth = Image::new(k.width, k.height, f64::INFINITY);
        for (u, v, c) in map.iter_valid() {
            depth.set(u, v, pose.to_camera_frame(c).z);
        }
        let loss = scene_coord_loss(&map, &depth, &pose, &k).unwrap();
        assert!(loss < 1e-7, "loss {loss}");
    }

    #[test]
    fn loss_of_constant_offset_is_offset_times_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng);
        let k = test_intrinsics();
        let mut map = synthetic_map(&pose, &k, &mut rng.clone(), 0.0, 0.0);
        let mut depth = Image::new(k.width, k.height, f64::INFINITY);
        for y in 0..k.height {
            for x in 0..k.width {
                depth.set(x, y, pose.to_camera_frame(map.coord(x, y)).z);
            }
        }
        let offset = Vector3::new(0.1, 0.0, 0.0);
        for c in &mut map.coords {
            *c += offset;
        }
        let n = map.valid_count() as f64;
        let loss = scene_coord_loss(&map, &depth, &pose, &k).unwrap();
        assert!((loss - 0.1 * n).abs() < 1e-6, "loss {loss}, expected {}", 0.1 * n);
    }

    #[test]
    fn loss_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        let k = test_intrinsics();
        let mut map = synthetic_map(&pose, &k, &mut rng, 0.0, 0.0);
        // Random perturbations and some invalid pixels.
        let mut depth = Image::new(k.width, k.height, f64::INFINITY);
        for y in 0..k.height {
            for x in 0..k.width {
                depth.set(x, y, pose.to_camera_frame(map.coord(x, y)).z);
            }
        }
        for (i, c) in map.coords.iter_mut().enumerate() {
            *c += Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            );
            if i % 7 == 0 {
                map.weights[i] = false;
            }
        }
        let loss = scene_coord_loss(&map, &depth, &pose, &k).unwrap();
        // Independent naive evaluation.
        let mut naive = 0.0;
        for y in 0..k.height {
            for x in 0..k.width {
                if !map.weight(x, y) {
                    continue;
                }
                let d = *depth.get(x, y);
                let dir = k.unproject_dir(x as f64, y as f64);
                let gt = pose.rotation().matrix() * (dir * d) + pose.translation();
                naive += (map.coord(x, y) - gt).norm();
            }
        }
        assert!((loss - naive).abs() < 1e-9, "loss {loss} vs naive {naive}");
    }

    #[test]
    fn loss_rejects_dimension_mismatch() {
        let k = test_intrinsics();
        let map = SceneCoordMap::from_parts(2, 2, vec![Vector3::zeros(); 4], vec![true; 4]);
        let depth = Image::new(3, 3, 1.0);
        assert!(matches!(
            scene_coord_loss(&map, &depth, &Pose::identity(), &k),
            Err(PoseInitError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pnp_recovers_known_pose_from_exact_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = test_intrinsics();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let corr = synthesize(&pose, &k, 20, &mut rng);
            let est = pnp_minimal(&corr, &k).unwrap();
            let rot_err = est.rotation().angle_to(pose.rotation());
            let trans_err = (est.translation() - pose.translation()).norm();
            assert!(rot_err < 1e-6, "rotation error {rot_err}");
            assert!(trans_err < 1e-8, "translation error {trans_err}");
        }
    }

    #[test]
    fn pnp_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = test_intrinsics();
        let pose = Pose::identity();
        let corr = synthesize(&pose, &k, 24, &mut rng);
        let est = pnp_minimal(&corr, &k).unwrap();
        assert!(est.rotation().angle_to(pose.rotation()) < 1e-6);
        assert!(est.translation().norm() < 1e-8);
    }

    #[test]
    fn pnp_rejects_five_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = test_intrinsics();
        let pose = random_pose(&mut rng);
        let corr = synthesize(&pose, &k, 5, &mut rng);
        assert!(matches!(
            pnp_minimal(&corr, &k),
            Err(PoseInitError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn ransac_on_noiseless_map_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let k = test_intrinsics();
        let pose = random_pose(&mut rng);
        let map = synthetic_map(&pose, &k, &mut rng, 0.0, 0.0);
        let res = ransac_pnp(&map, &k, &RansacConfig::default()).unwrap();
        assert!(res.inlier_ratio > 0.99, "inlier ratio {}", res.inlier_ratio);
        let rot_err = res.pose.rotation().angle_to(pose.rotation());
        assert!(rot_err < 1e-5, "rotation error {rot_err}");
    }

    #[test]
    fn ransac_survives_thirty_percent_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = test_intrinsics();
        let pose = random_pose(&mut rng);
        let map = synthetic_map(&pose, &k, &mut rng, 0.3, 0.0);
        let res = ransac_pnp(&map, &k, &RansacConfig { iterations: 500, ..Default::default() }).unwrap();
        let rot_err = res.pose.rotation().angle_to(pose.rotation()).to_degrees();
        assert!(rot_err < 1.0, "rotation error {rot_err} deg");
    }

    #[test]
    fn ransac_reports_no_consensus_on_pure_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = test_intrinsics();
        let pose = random_pose(&mut rng);
        let map = synthetic_map(&pose, &k, &mut rng, 1.0, 0.0);
        assert!(matches!(
            ransac_pnp(&map, &k, &RansacConfig { iterations: 100, ..Default::default() }),
            Err(PoseInitError::NoConsensus(_))
        ));
    }

    #[test]
    fn ransac_rejects_too_few_correspondences() {
        let k = test_intrinsics();
        let map = SceneCoordMap::from_parts(
            k.width,
            k.height,
            vec![Vector3::zeros(); k.width * k.height],
            vec![false; k.width * k.height],
        );
        assert!(matches!(
            ransac_pnp(&map, &k, &RansacConfig::default()),
            Err(PoseInitError::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn ransac_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = test_intrinsics();
        let pose = random_pose(&mut rng);
        let map = synthetic_map(&pose, &k, &mut rng, 0.25, 0.5);
        let cfg = RansacConfig { iterations: 200, inlier_px_threshold: 2.0, seed: 99 };
        let a = ransac_pnp(&map, &k, &cfg).unwrap();
        let b = ransac_pnp(&map, &k, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn median_rotation_error_is_monotone_in_outlier_rate() {
        let k = test_intrinsics();
        let mut errors = |fraction: f64| -> Vec<f64> {
            (0..50)
                .map(|trial| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
                    let pose = random_pose(&mut rng);
                    let map = synthetic_map(&pose, &k, &mut rng, fraction, 0.5);
                    let cfg = RansacConfig { iterations: 300, inlier_px_threshold: 2.0, seed: trial };
                    let res = ransac_pnp(&map, &k, &cfg).unwrap();
                    res.pose.rotation().angle_to(pose.rotation())
                })
                .collect()
        };
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let at_30 = median(errors(0.3));
        let at_50 = median(errors(0.5));
        assert!(
            at_30 <= at_50,
            "median rotation error at 30% outliers ({at_30}) exceeds 50% ({at_50})"
        );
    }
}
