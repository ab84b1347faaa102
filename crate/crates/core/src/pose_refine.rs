//! One-step Levenberg-Marquardt pose refinement from dense feature
//! alignment between a rendered view of the current shape and the observed
//! view.
//!
//! For each visible surface point `p` (camera frame, from the render), the
//! residual compares observed features at the warped projection against
//! rendered features at the source pixel:
//!
//! ```text
//! r_j(xi) = f_obs(P(K p')) - f_rend(u_j, v_j),   p' = (I + [dc]x) p + dt
//! ```
//!
//! The warp is linearized in the twist `xi = (dc, dt)`; one damped step
//! solves `(J^T J + mu I + lambda I) xi = -(J^T r) + mu xi_prior`. The
//! solved twist maps rendered-camera points into the observed camera, so
//! the pose update composes its inverse on the right:
//! `T_new = T ∘ exp(xi)^-1`.

use crate::feature::FeatureMap;
use crate::geom::{exp_map, log_map, skew, GeomError, Intrinsics, Pose, Twist};
use nalgebra::{DVector, Matrix2x3, Matrix3, Matrix3x6, Matrix6, OMatrix, Vector3, Vector6, U6};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("{got} usable points, at least {needed} required")]
    TooFewPoints { got: usize, needed: usize },
    #[error("damped normal equations are numerically singular (condition {0:.3e})")]
    SingularSystem(f64),
    #[error("update/pose list lengths disagree: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Damping policy for the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Damping {
    /// `lambda = factor * trace(J^T J) / 6`: scale-aware, never singular.
    AutoScaled { factor: f64 },
    Fixed(f64),
}

/// How per-point residuals enter the normal equations. `Stacked` is the
/// standard Gauss-Newton accumulation `sum J_j^T J_j`, `sum J_j^T r_j`.
/// `Summed` first sums residuals and Jacobians over points and then forms
/// the normal equations from the aggregates; it is kept for comparison and
/// degenerates on multi-point problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalEquations {
    Stacked,
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub damping: Damping,
    pub normal_equations: NormalEquations,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            damping: Damping::AutoScaled { factor: 1e-3 },
            normal_equations: NormalEquations::Stacked,
        }
    }
}

/// Warp margin: warped samples must stay this many pixels inside the
/// observed feature map; points outside are dropped, not clamped.
const INTERIOR_MARGIN_PX: f64 = 1.0;

/// A point participating in the alignment: its pixel in the rendered view
/// and its rendered-camera-frame position `p = depth * K^-1 (u, v, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignPoint {
    pub u: f64,
    pub v: f64,
    pub p_cam: Vector3<f64>,
}

/// One feature-alignment problem for a single view.
#[derive(Debug, Clone)]
pub struct AlignmentProblem<'a> {
    pub observed: &'a FeatureMap,
    pub rendered: &'a FeatureMap,
    pub points: Vec<AlignPoint>,
    pub intrinsics: Intrinsics,
    pub lm: LmConfig,
    /// Weight of the quadratic prior pulling the solution toward
    /// `prior_pose`; 0 disables it.
    pub prior_weight: f64,
    pub prior_pose: Pose,
    pub current_pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmUpdate {
    pub twist: Twist,
    pub residual_norm_before: f64,
    pub residual_norm_after: f64,
    pub num_points_used: usize,
}

fn warp(point: &AlignPoint, twist: &Twist) -> Vector3<f64> {
    // Linearized rigid warp (I + [dc]x) p + dt.
    point.p_cam + twist.rot.cross(&point.p_cam) + twist.trans
}

/// Feature residual of one point under a twist. `None` when the point
/// warps behind the camera or outside the interior margin of the observed
/// map (excluded from the solve, counted by the caller).
pub fn residual(prob: &AlignmentProblem, point_index: usize, twist: &Twist) -> Option<DVector<f64>> {
    let pt = &prob.points[point_index];
    let warped = warp(pt, twist);
    if warped.z <= 1e-9 {
        return None;
    }
    let (u, v) = prob.intrinsics.project_camera_point(&warped);
    if !prob.observed.in_bounds(u, v, INTERIOR_MARGIN_PX) {
        return None;
    }
    let c = prob.observed.channels();
    let mut obs = DVector::zeros(c);
    prob.observed.sample_into(u, v, obs.as_mut_slice());
    let mut rend = vec![0.0; c];
    prob.rendered.sample_into(pt.u, pt.v, &mut rend);
    for (o, r) in obs.iter_mut().zip(&rend) {
        *o -= r;
    }
    Some(obs)
}

/// Analytic Jacobian of the residual at zero twist: observed feature
/// gradient (c x 2) times the pinhole projection Jacobian (2 x 3) times the
/// warp Jacobian `[-[p]x | I]` (3 x 6). `None` exactly when
/// [`residual`] at zero twist is `None`.
pub fn jacobian(prob: &AlignmentProblem, point_index: usize) -> Option<OMatrix<f64, nalgebra::Dyn, U6>> {
    let pt = &prob.points[point_index];
    let p = pt.p_cam;
    if p.z <= 1e-9 {
        return None;
    }
    let (u, v) = prob.intrinsics.project_camera_point(&p);
    if !prob.observed.in_bounds(u, v, INTERIOR_MARGIN_PX) {
        return None;
    }
    let c = prob.observed.channels();
    let mut values = vec![0.0; c];
    let mut grads = vec![[0.0; 2]; c];
    prob.observed.sample_with_grad_into(u, v, &mut values, &mut grads);

    let iz = 1.0 / p.z;
    let proj = Matrix2x3::new(
        prob.intrinsics.fx * iz,
        0.0,
        -prob.intrinsics.fx * p.x * iz * iz,
        0.0,
        prob.intrinsics.fy * iz,
        -prob.intrinsics.fy * p.y * iz * iz,
    );
    let mut wjac = Matrix3x6::zeros();
    wjac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&p)));
    wjac.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let chain = proj * wjac; // 2 x 6

    let mut j = OMatrix::<f64, nalgebra::Dyn, U6>::zeros(c);
    for (ci, g) in grads.iter().enumerate() {
        for col in 0..6 {
            j[(ci, col)] = g[0] * chain[(0, col)] + g[1] * chain[(1, col)];
        }
    }
    Some(j)
}

/// The twist that would move `current` exactly onto `prior` under the
/// update convention `T_new = T ∘ exp(xi)^-1`.
fn prior_twist(current: &Pose, prior: &Pose) -> Result<Twist, GeomError> {
    log_map(&prior.inverse().compose(current))
}

/// One damped step of the feature-alignment solve. Per-point residuals are
/// reweighted by a Huber kernel scaled to their median norm, so isolated
/// bands of badly reconstructed geometry stop steering the step once the
/// bulk of the view is aligned. Points are accumulated sequentially in
/// index order, so the result is deterministic and bit-identical under
/// removal of excluded points.
pub fn lm_step(prob: &AlignmentProblem) -> Result<LmUpdate, AlignError> {
    let zero = Twist::zero();
    let c = prob.observed.channels();
    let mut terms: Vec<(DVector<f64>, OMatrix<f64, nalgebra::Dyn, U6>)> = Vec::new();
    let mut used_points: Vec<usize> = Vec::new();
    let mut sq_before = 0.0;
    for idx in 0..prob.points.len() {
        let (Some(r), Some(j)) = (residual(prob, idx, &zero), jacobian(prob, idx)) else {
            continue;
        };
        sq_before += r.norm_squared();
        terms.push((r, j));
        used_points.push(idx);
    }
    if used_points.len() < 6 {
        return Err(AlignError::TooFewPoints {
            got: used_points.len(),
            needed: 6,
        });
    }

    // Huber threshold from the median residual norm.
    let mut norms: Vec<f64> = terms.iter().map(|(r, _)| r.norm()).collect();
    norms.sort_by(f64::total_cmp);
    let huber_k = 1.345 * norms[norms.len() / 2];

    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    let mut r_sum = DVector::<f64>::zeros(c);
    let mut j_sum = OMatrix::<f64, nalgebra::Dyn, U6>::zeros(c);
    for (r, j) in &terms {
        let rn = r.norm();
        let w = if rn <= huber_k { 1.0 } else { huber_k / rn };
        match prob.lm.normal_equations {
            NormalEquations::Stacked => {
                h += j.transpose() * j * w;
                g += j.transpose() * r * w;
            }
            NormalEquations::Summed => {
                r_sum += r * w;
                j_sum += j * w;
            }
        }
    }
    if prob.lm.normal_equations == NormalEquations::Summed {
        h = (j_sum.transpose() * &j_sum).into();
        g = j_sum.transpose() * &r_sum;
    }

    // Scale-aware damping is derived from the data term alone so a strong
    // prior does not inflate it.
    let data_scale = (h.trace() / 6.0).max(1e-12);
    let lambda = match prob.lm.damping {
        Damping::Fixed(l) => l,
        Damping::AutoScaled { factor } => factor * data_scale,
    };

    // The prior weight is relative to the data term: the pose anchor must
    // hold regardless of how many points the view contributes.
    let mut xi_prior = Vector6::zeros();
    if prob.prior_weight > 0.0 {
        let mu = prob.prior_weight * data_scale;
        xi_prior = prior_twist(&prob.current_pose, &prob.prior_pose)?.to_vector();
        h += Matrix6::identity() * mu;
        g -= xi_prior * mu;
    }
    let damped = h + Matrix6::identity() * lambda;

    let eigen = damped.symmetric_eigenvalues();
    let (emax, emin) = (eigen.max(), eigen.min());
    if emin <= 0.0 || emax / emin > 1e12 {
        return Err(AlignError::SingularSystem(if emin > 0.0 { emax / emin } else { f64::INFINITY }));
    }
    let chol = damped
        .cholesky()
        .ok_or(AlignError::SingularSystem(f64::INFINITY))?;
    let solution = chol.solve(&(-g));
    let twist = Twist::from_vector(&solution);

    let mut sq_after = 0.0;
    match prob.lm.normal_equations {
        NormalEquations::Stacked => {
            for &idx in &used_points {
                if let Some(r) = residual(prob, idx, &twist) {
                    sq_after += r.norm_squared();
                }
            }
        }
        NormalEquations::Summed => {
            let mut r_after = DVector::<f64>::zeros(c);
            for &idx in &used_points {
                if let Some(r) = residual(prob, idx, &twist) {
                    r_after += r;
                }
            }
            sq_after = r_after.norm_squared();
            sq_before = r_sum.norm_squared();
        }
    }

    Ok(LmUpdate {
        twist,
        residual_norm_before: sq_before.sqrt(),
        residual_norm_after: sq_after.sqrt(),
        num_points_used: used_points.len(),
    })
}

/// Applies a solved alignment twist to a camera-to-world pose:
/// `T_new = T ∘ exp(xi)^-1`.
pub fn apply_update(pose: &Pose, twist: &Twist) -> Pose {
    pose.compose(&exp_map(twist).inverse())
}

/// Training-protocol loss for a batch of pose updates: the summed squared
/// Frobenius distance between the linearized update applied to the initial
/// pose and the ground-truth pose, on 4x4 homogeneous matrices.
pub fn pose_refine_loss(
    updates: &[Twist],
    initial_poses: &[Pose],
    gt_poses: &[Pose],
) -> Result<f64, AlignError> {
    if updates.len() != initial_poses.len() {
        return Err(AlignError::LengthMismatch(updates.len(), initial_poses.len()));
    }
    if updates.len() != gt_poses.len() {
        return Err(AlignError::LengthMismatch(updates.len(), gt_poses.len()));
    }
    let mut total = 0.0;
    for ((xi, init), gt) in updates.iter().zip(initial_poses).zip(gt_poses) {
        let mut delta = nalgebra::Matrix4::identity();
        delta
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() + skew(&xi.rot)));
        delta.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.trans);
        let diff = delta * init.to_homogeneous() - gt.to_homogeneous();
        total += diff.norm_squared();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::FeatureMap;
    use crate::geom::Intrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    /// Smooth synthetic feature map: sums of shifted Gaussians per channel.
    fn smooth_map(channels: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut fm = FeatureMap::zeros(channels, w, h);
        for c in 0..channels {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.0..h as f64),
                        rng.random_range(4.0..12.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for (bx, by, s, a) in &blobs {
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                    fm.set_value(c, x, y, v);
                }
            }
        }
        fm
    }

    fn grid_points(k: &Intrinsics, depth: f64) -> Vec<AlignPoint> {
        let mut points = Vec::new();
        for v in (8..56).step_by(4) {
            for u in (8..56).step_by(4) {
                points.push(AlignPoint {
                    u: u as f64,
                    v: v as f64,
                    p_cam: k.unproject_dir(u as f64, v as f64) * depth,
                });
            }
        }
        points
    }

    /// Points at fractional pixels: the finite-difference stencil of the
    /// bilinear interpolant must not straddle texel boundaries.
    fn fractional_points(k: &Intrinsics, depth: f64) -> Vec<AlignPoint> {
        let mut points = Vec::new();
        for v in (8..56).step_by(4) {
            for u in (8..56).step_by(4) {
                let (uf, vf) = (u as f64 + 0.37, v as f64 + 0.61);
                points.push(AlignPoint {
                    u: uf,
                    v: vf,
                    p_cam: k.unproject_dir(uf, vf) * depth,
                });
            }
        }
        points
    }

    fn problem<'a>(
        observed: &'a FeatureMap,
        rendered: &'a FeatureMap,
        points: Vec<AlignPoint>,
    ) -> AlignmentProblem<'a> {
        AlignmentProblem {
            observed,
            rendered,
            points,
            intrinsics: test_intrinsics(),
            lm: LmConfig::default(),
            prior_weight: 0.0,
            prior_pose: Pose::identity(),
            current_pose: Pose::identity(),
        }
    }

    #[test]
    fn residual_is_zero_for_self_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = smooth_map(3, 64, 64, &mut rng);
        let prob = problem(&fm, &fm, grid_points(&test_intrinsics(), 1.5));
        for idx in 0..prob.points.len() {
            let r = residual(&prob, idx, &Twist::zero()).unwrap();
            assert!(r.norm() < 1e-12, "residual norm {}", r.norm());
        }
    }

    #[test]
    fn residual_sees_constant_feature_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let mut observed = rendered.clone();
        for c in 0..2 {
            for y in 0..64 {
                for x in 0..64 {
                    observed.set_value(c, x, y, observed.value(c, x, y) + 0.5);
                }
            }
        }
        let prob = problem(&observed, &rendered, grid_points(&test_intrinsics(), 1.5));
        for idx in 0..prob.points.len() {
            let r = residual(&prob, idx, &Twist::zero()).unwrap();
            for ci in 0..2 {
                assert!((r[ci] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let k = test_intrinsics();
        let prob = problem(&observed, &rendered, grid_points(&k, 1.2));
        let twist = Twist::new(
            Vector3::new(0.004, -0.003, 0.002),
            Vector3::new(-0.01, 0.02, 0.005),
        );
        for idx in (0..prob.points.len()).step_by(7) {
            let Some(r) = residual(&prob, idx, &twist) else { continue };
            // Independent reevaluation through the warp.
            let pt = &prob.points[idx];
            let p = pt.p_cam;
            let warped = Vector3::new(
                p.x + twist.rot.y * p.z - twist.rot.z * p.y + twist.trans.x,
                p.y + twist.rot.z * p.x - twist.rot.x * p.z + twist.trans.y,
                p.z + twist.rot.x * p.y - twist.rot.y * p.x + twist.trans.z,
            );
            let u = k.fx * warped.x / warped.z + k.cx;
            let v = k.fy * warped.y / warped.z + k.cy;
            let obs = observed.sample(u, v);
            let rend = rendered.sample(pt.u, pt.v);
            for ci in 0..2 {
                assert!((r[ci] - (obs[ci] - rend[ci])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jacobian_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let prob = problem(&observed, &rendered, fractional_points(&test_intrinsics(), 1.4));
        let h = 1e-6;
        let mut checked = 0;
        for idx in 0..prob.points.len() {
            let Some(j) = jacobian(&prob, idx) else { continue };
            let mut jfd = OMatrix::<f64, nalgebra::Dyn, U6>::zeros(2);
            let mut ok = true;
            for col in 0..6 {
                let mut dv = Vector6::zeros();
                dv[col] = h;
                let tp = Twist::from_vector(&dv);
                let tm = Twist::from_vector(&(-dv));
                let (Some(rp), Some(rm)) = (residual(&prob, idx, &tp), residual(&prob, idx, &tm)) else {
                    ok = false;
                    break;
                };
                for row in 0..2 {
                    jfd[(row, col)] = (rp[row] - rm[row]) / (2.0 * h);
                }
            }
            if !ok {
                continue;
            }
            let scale = 1.0 + j.amax();
            assert!(
                (j.clone() - jfd.clone()).amax() < 1e-4 * scale,
                "analytic {j} vs fd {jfd}"
            );
            checked += 1;
        }
        assert!(checked > 50, "only {checked} points checked");
    }

    #[test]
    fn jacobian_for_axial_point_ignores_z_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let observed = smooth_map(1, 64, 64, &mut rng);
        let rendered = observed.clone();
        let k = test_intrinsics();
        // Point exactly on the optical axis: motion along the ray does not
        // move the projection.
        let points = vec![AlignPoint {
            u: k.cx,
            v: k.cy,
            p_cam: Vector3::new(0.0, 0.0, 1.5),
        }];
        let prob = problem(&observed, &rendered, points);
        let j = jacobian(&prob, 0).unwrap();
        assert_eq!(j[(0, 5)], 0.0, "dz column should vanish on-axis");
    }

    #[test]
    fn jacobian_of_constant_features_is_zero() {
        let fm = FeatureMap::zeros(2, 64, 64);
        let prob = problem(&fm, &fm, grid_points(&test_intrinsics(), 1.5));
        let j = jacobian(&prob, 3).unwrap();
        assert_eq!(j.amax(), 0.0);
    }

    #[test]
    fn aligned_problem_gives_zero_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = smooth_map(3, 64, 64, &mut rng);
        let prob = problem(&fm, &fm, grid_points(&test_intrinsics(), 1.5));
        let update = lm_step(&prob).unwrap();
        assert!(update.twist.norm() < 1e-8, "twist norm {}", update.twist.norm());
        assert!(update.residual_norm_before < 1e-12);
    }

    #[test]
    fn update_norm_is_monotone_in_damping() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let mut norms = Vec::new();
        for lambda in [1e-2, 1.0, 1e2, 1e4] {
            let mut prob = problem(&observed, &rendered, grid_points(&test_intrinsics(), 1.5));
            prob.lm.damping = Damping::Fixed(lambda);
            norms.push(lm_step(&prob).unwrap().twist.norm());
        }
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "norms not decreasing: {norms:?}");
        }
    }

    #[test]
    fn translation_offset_is_recovered_in_one_step() {
        // Linear-ramp features and a 2 px horizontal offset: one damped
        // step on this linear problem is near-exact.
        let (w, h) = (64, 64);
        let mut rendered = FeatureMap::zeros(2, w, h);
        let mut observed = FeatureMap::zeros(2, w, h);
        for y in 0..h {
            for x in 0..w {
                rendered.set_value(0, x, y, x as f64);
                rendered.set_value(1, x, y, y as f64);
                // Observed scene shifted: the ramp carries pixel coordinates,
                // so matching features means u_obs = u_rend + 2.
                observed.set_value(0, x, y, x as f64 - 2.0);
                observed.set_value(1, x, y, y as f64);
            }
        }
        let mut prob = problem(&observed, &rendered, grid_points(&test_intrinsics(), 1.0));
        prob.lm.damping = Damping::Fixed(1e-9);
        let update = lm_step(&prob).unwrap();
        assert!(
            update.residual_norm_after < 0.2 * update.residual_norm_before,
            "before {} after {}",
            update.residual_norm_before,
            update.residual_norm_after
        );
    }

    #[test]
    fn out_of_bounds_points_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let k = test_intrinsics();
        let mut points = grid_points(&k, 1.5);
        let clean = points.clone();
        // Points projecting outside the interior margin and one behind the
        // camera.
        points.push(AlignPoint { u: 0.0, v: 0.0, p_cam: k.unproject_dir(-50.0, -50.0) * 1.5 });
        points.push(AlignPoint { u: 5.0, v: 5.0, p_cam: Vector3::new(0.0, 0.0, -1.0) });
        let with_oob = lm_step(&problem(&observed, &rendered, points)).unwrap();
        let without = lm_step(&problem(&observed, &rendered, clean)).unwrap();
        assert_eq!(with_oob, without);
    }

    #[test]
    fn too_few_points_is_rejected() {
        let fm = FeatureMap::zeros(1, 64, 64);
        let points = vec![AlignPoint { u: 10.0, v: 10.0, p_cam: Vector3::new(0.0, 0.0, 1.0) }; 5];
        assert!(matches!(
            lm_step(&problem(&fm, &fm, points)),
            Err(AlignError::TooFewPoints { got: 5, needed: 6 })
        ));
    }

    #[test]
    fn infinite_prior_weight_pins_the_pose_to_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let current = exp_map(&Twist::new(
            Vector3::new(0.02, -0.01, 0.03),
            Vector3::new(0.1, 0.0, -1.5),
        ));
        let prior = exp_map(&Twist::new(
            Vector3::new(-0.01, 0.02, 0.01),
            Vector3::new(0.05, 0.05, -1.45),
        ));
        let mut gaps = Vec::new();
        for mu in [0.0, 1.0, 1e3, 1e6, 1e9] {
            let mut prob = problem(&observed, &rendered, grid_points(&test_intrinsics(), 1.5));
            prob.prior_weight = mu;
            prob.prior_pose = prior;
            prob.current_pose = current;
            let update = lm_step(&prob).unwrap();
            let new_pose = apply_update(&current, &update.twist);
            gaps.push((new_pose.to_homogeneous() - prior.to_homogeneous()).norm());
        }
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "gaps not decreasing: {gaps:?}");
        }
        assert!(gaps[gaps.len() - 1] < 1e-6, "final gap {}", gaps[gaps.len() - 1]);
    }

    #[test]
    fn summed_mode_solves_the_aggregate_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let observed = smooth_map(2, 64, 64, &mut rng);
        let rendered = smooth_map(2, 64, 64, &mut rng);
        let mut prob = problem(&observed, &rendered, grid_points(&test_intrinsics(), 1.5));
        prob.lm.normal_equations = NormalEquations::Summed;
        let update = lm_step(&prob).unwrap();
        assert!(update.twist.is_finite());
        let mut stacked = prob.clone();
        stacked.lm.normal_equations = NormalEquations::Stacked;
        let reference = lm_step(&stacked).unwrap();
        assert_ne!(update.twist, reference.twist);
    }

    #[test]
    fn pose_refine_loss_is_zero_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let poses: Vec<Pose> = (0..4)
            .map(|_| {
                exp_map(&Twist::new(
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                ))
            })
            .collect();
        let zeros = vec![Twist::zero(); poses.len()];
        let loss = pose_refine_loss(&zeros, &poses, &poses).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn pose_refine_loss_matches_matrix_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let init: Vec<Pose> = (0..3)
            .map(|_| {
                exp_map(&Twist::new(
                    Vector3::new(rng.random_range(-0.5..0.5), 0.1, -0.2),
                    Vector3::new(0.3, rng.random_range(-0.5..0.5), 1.0),
                ))
            })
            .collect();
        let offset = Twist::new(Vector3::new(0.05, -0.02, 0.01), Vector3::new(0.1, 0.2, -0.05));
        let gt: Vec<Pose> = init.iter().map(|p| exp_map(&offset).compose(p)).collect();
        let zeros = vec![Twist::zero(); init.len()];
        let loss = pose_refine_loss(&zeros, &init, &gt).unwrap();
        // Direct matrix arithmetic per pose.
        let mut oracle = 0.0;
        for (p, q) in init.iter().zip(&gt) {
            let d = p.to_homogeneous() - q.to_homogeneous();
            let mut sq = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    sq += d[(r, c)] * d[(r, c)];
                }
            }
            oracle += sq;
        }
        assert!((loss - oracle).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn pose_refine_loss_is_non_negative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let xi = Twist::new(
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ),
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
            );
            let init = exp_map(&Twist::new(
                Vector3::new(rng.random_range(-1.0..1.0), 0.0, 0.3),
                Vector3::new(0.0, rng.random_range(-1.0..1.0), 1.2),
            ));
            let gt = exp_map(&Twist::new(
                Vector3::new(0.2, rng.random_range(-1.0..1.0), -0.1),
                Vector3::new(rng.random_range(-1.0..1.0), 0.1, 0.9),
            ));
            let loss = pose_refine_loss(&[xi], &[init], &[gt]).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn pose_refine_loss_rejects_length_mismatch() {
        let loss = pose_refine_loss(&[Twist::zero()], &[Pose::identity(), Pose::identity()], &[Pose::identity()]);
        assert!(matches!(loss, Err(AlignError::LengthMismatch(1, 2))));
    }
}
