//! Synthetic few-view scene generation with analytic ground truth, the
//! Gaussian pose-perturbation protocol, and scene bundles on disk.
//!
//! A scene holds an analytic shape, its ground-truth SDF grid and mesh, and
//! `k` calibrated views rendered from cameras on a ring: azimuth uniform in
//! `[0, 2pi)`, elevation uniform in a narrow band, all looking at the
//! origin. Depth, mask, and Lambertian intensity come from the renderer, so
//! every view is exactly consistent with the stored ground truth.

use crate::formats::{
    read_depth_image, read_png_gray8, read_png_mask, read_sdf_grid, write_depth_image,
    write_png_gray8, write_png_mask, write_sdf_grid, FormatError,
};
use crate::geom::{exp_map, Intrinsics, Pose, Rotation, Twist};
use crate::mesh::{extract_mesh, MeshError, TriangleMesh};
use crate::render::{render, shade_lambertian, RenderConfig, RenderError};
use crate::sdf::{GridSpec, Primitive, SdfError, SdfGrid};
use crate::shape_update::{ShapeError, ViewObservation};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Grid(#[from] SdfError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    View(#[from] ShapeError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("scene bundle at {path}: {reason}")]
    Bundle { path: String, reason: String },
}

/// Default world-space light direction for Lambertian shading.
pub const DEFAULT_LIGHT_DIR: [f64; 3] = [0.4, 0.8, 0.3];

/// Camera ring: cameras at `radius` from the origin, azimuth uniform over
/// the full circle, elevation uniform within `+-elevation_band_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRigSpec {
    pub radius: f64,
    pub elevation_band_deg: f64,
    pub num_views: usize,
}

impl Default for CameraRigSpec {
    fn default() -> Self {
        CameraRigSpec {
            radius: 1.5,
            elevation_band_deg: 15.0,
            num_views: 5,
        }
    }
}

/// Default intrinsics sized so the unit-box object fills most of the frame.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(245.0, 245.0, 112.0, 112.0, 224, 224).expect("valid default intrinsics")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub shape: Primitive,
    pub rig: CameraRigSpec,
    pub intrinsics: Intrinsics,
    pub grid: GridSpec,
    pub render: RenderConfig,
    pub light_dir: [f64; 3],
}

impl SceneSpec {
    pub fn new(name: impl Into<String>, shape: Primitive) -> Self {
        SceneSpec {
            name: name.into(),
            shape,
            rig: CameraRigSpec::default(),
            intrinsics: default_intrinsics(),
            grid: GridSpec::default_object(),
            render: RenderConfig::default(),
            light_dir: DEFAULT_LIGHT_DIR,
        }
    }
}

/// A fully specified synthetic scene. `views[i].pose_estimate` holds the
/// ground-truth pose; reconstruction substitutes its own estimates.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub shape: Primitive,
    pub gt_grid: SdfGrid,
    pub gt_mesh: TriangleMesh,
    pub views: Vec<ViewObservation>,
    pub intrinsics: Intrinsics,
    pub light_dir: Vector3<f64>,
    pub seed: u64,
}

impl Scene {
    pub fn gt_poses(&self) -> Vec<Pose> {
        self.views.iter().map(|v| v.pose_estimate).collect()
    }
}

/// Camera-to-world pose at `center` looking at `target`, y-up convention.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
    let z_axis = (target - center).normalize();
    let x_axis = up.cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    let r = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
    Pose::new(Rotation::orthonormalized(r).expect("look-at basis"), center)
}

fn ring_pose(rig: &CameraRigSpec, rng: &mut ChaCha8Rng) -> Pose {
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let band = rig.elevation_band_deg.to_radians();
    let elevation = rng.random_range(-band..band);
    let center = Vector3::new(
        rig.radius * elevation.cos() * azimuth.cos(),
        rig.radius * elevation.sin(),
        rig.radius * elevation.cos() * azimuth.sin(),
    );
    look_at(center, Vector3::zeros(), Vector3::y())
}

/// Generates a scene deterministically from its seed: analytic ground-truth
/// grid and mesh, then per-view depth/mask/intensity rendered from ring
/// cameras.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    if spec.rig.num_views == 0 {
        return Err(SceneError::InvalidSpec("a scene needs at least one view".into()));
    }
    if spec.rig.radius <= 0.0 {
        return Err(SceneError::InvalidSpec(format!(
            "camera radius {} must be positive",
            spec.rig.radius
        )));
    }
    let gt_grid = SdfGrid::from_analytic(&spec.shape, &spec.grid)?;
    let gt_mesh = extract_mesh(&gt_grid, 0.0)?;
    let light_dir = Vector3::new(spec.light_dir[0], spec.light_dir[1], spec.light_dir[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(spec.rig.num_views);
    for view_idx in 0..spec.rig.num_views {
        let pose = ring_pose(&spec.rig, &mut rng);
        let out = render(&gt_grid, &pose, &spec.intrinsics, &spec.render)?;
        if out.points.is_empty() {
            return Err(SceneError::InvalidSpec(format!(
                "view {view_idx} sees an empty mask; the rig does not frame the object"
            )));
        }
        let intensity = shade_lambertian(&gt_grid, &out, &light_dir);
        views.push(ViewObservation::new(
            intensity,
            out.depth,
            out.mask,
            spec.intrinsics,
            pose,
        )?);
    }
    Ok(Scene {
        name: spec.name.clone(),
        shape: spec.shape.clone(),
        gt_grid,
        gt_mesh,
        views,
        intrinsics: spec.intrinsics,
        light_dir,
        seed,
    })
}

/// Noise levels of the pose-perturbation protocol. The three named levels
/// map to twist-space sigmas 0.75e-2, 1.5e-2, and 2.25e-2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    L1,
    L2,
    L3,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub level: NoiseLevel,
    /// Scales the translation components of the sampled twist relative to
    /// the shared sigma (1 = same sigma for rotation and translation).
    pub translation_multiplier: f64,
}

impl NoiseSpec {
    pub const SIGMA_L1: f64 = 0.75e-2;
    pub const SIGMA_L2: f64 = 1.5e-2;
    pub const SIGMA_L3: f64 = 2.25e-2;

    pub fn level(level: NoiseLevel) -> Self {
        let sigma = match level {
            NoiseLevel::L1 => Self::SIGMA_L1,
            NoiseLevel::L2 => Self::SIGMA_L2,
            NoiseLevel::L3 => Self::SIGMA_L3,
            NoiseLevel::Custom => 0.0,
        };
        NoiseSpec {
            sigma,
            level,
            translation_multiplier: 1.0,
        }
    }

    pub fn custom(sigma: f64) -> Self {
        NoiseSpec {
            sigma,
            level: NoiseLevel::Custom,
            translation_multiplier: 1.0,
        }
    }
}

/// Draws the 6-component Gaussian twists used by [`perturb_poses`]:
/// per-component standard deviation `sigma` (translation scaled by the
/// multiplier).
pub fn sample_noise_twists(n: usize, noise: &NoiseSpec, seed: u64) -> Vec<Twist> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
            let rot = Vector3::new(g(&mut rng), g(&mut rng), g(&mut rng)) * noise.sigma;
            let trans = Vector3::new(g(&mut rng), g(&mut rng), g(&mut rng))
                * (noise.sigma * noise.translation_multiplier);
            Twist::new(rot, trans)
        })
        .collect()
}

/// Applies Gaussian twist noise on the left of each pose:
/// `perturbed = exp(xi) * pose`. Deterministic per seed.
pub fn perturb_poses(poses: &[Pose], noise: &NoiseSpec, seed: u64) -> Vec<Pose> {
    let twists = sample_noise_twists(poses.len(), noise, seed);
    poses
        .iter()
        .zip(&twists)
        .map(|(pose, xi)| exp_map(xi).compose(pose))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ViewManifest {
    pose: Pose,
    depth: String,
    intensity: String,
    mask: String,
}

#[derive(Serialize, Deserialize)]
struct SceneManifest {
    name: String,
    seed: u64,
    shape: Primitive,
    intrinsics: Intrinsics,
    light_dir: [f64; 3],
    grid: String,
    views: Vec<ViewManifest>,
}

/// Writes a scene bundle directory: `scene.json`, the ground-truth grid in
/// SDFG format, the ground-truth mesh as PLY, and per-view depth (DPTH) and
/// intensity/mask PNGs. Returns the paths written.
pub fn save_scene_bundle(scene: &Scene, dir: &Path) -> Result<Vec<PathBuf>, SceneError> {
    std::fs::create_dir_all(dir).map_err(|e| SceneError::Bundle {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut written = Vec::new();
    let grid_name = "shape.sdfg".to_string();
    write_sdf_grid(&scene.gt_grid, &dir.join(&grid_name))?;
    written.push(dir.join(&grid_name));

    let mesh_path = dir.join("gt_mesh.ply");
    let file = std::fs::File::create(&mesh_path).map_err(|e| SceneError::Bundle {
        path: mesh_path.display().to_string(),
        reason: e.to_string(),
    })?;
    scene
        .gt_mesh
        .write_ply(std::io::BufWriter::new(file))
        .map_err(|e| SceneError::Bundle {
            path: mesh_path.display().to_string(),
            reason: e.to_string(),
        })?;
    written.push(mesh_path);

    let mut views = Vec::new();
    for (i, view) in scene.views.iter().enumerate() {
        let depth = format!("view_{i:03}.dpth");
        let intensity = format!("view_{i:03}_intensity.png");
        let mask = format!("view_{i:03}_mask.png");
        write_depth_image(&view.depth, &dir.join(&depth))?;
        write_png_gray8(&view.intensity, &dir.join(&intensity))?;
        write_png_mask(&view.mask, &dir.join(&mask))?;
        written.push(dir.join(&depth));
        written.push(dir.join(&intensity));
        written.push(dir.join(&mask));
        views.push(ViewManifest {
            pose: view.pose_estimate,
            depth,
            intensity,
            mask,
        });
    }
    let manifest = SceneManifest {
        name: scene.name.clone(),
        seed: scene.seed,
        shape: scene.shape.clone(),
        intrinsics: scene.intrinsics,
        light_dir: [scene.light_dir.x, scene.light_dir.y, scene.light_dir.z],
        grid: grid_name,
        views,
    };
    let json_path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&json_path, text).map_err(|e| SceneError::Bundle {
        path: json_path.display().to_string(),
        reason: e.to_string(),
    })?;
    written.push(json_path);
    Ok(written)
}

/// Loads a scene bundle written by [`save_scene_bundle`]. The ground-truth
/// mesh is re-extracted from the stored grid.
pub fn load_scene_bundle(dir: &Path) -> Result<Scene, SceneError> {
    let json_path = dir.join("scene.json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| SceneError::Bundle {
        path: json_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let manifest: SceneManifest = serde_json::from_str(&text).map_err(|e| SceneError::Bundle {
        path: json_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let gt_grid = read_sdf_grid(&dir.join(&manifest.grid))?;
    let gt_mesh = extract_mesh(&gt_grid, 0.0)?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for vm in &manifest.views {
        let depth = read_depth_image(&dir.join(&vm.depth))?;
        let intensity = read_png_gray8(&dir.join(&vm.intensity))?;
        let mask = read_png_mask(&dir.join(&vm.mask))?;
        views.push(ViewObservation::new(
            intensity,
            depth,
            mask,
            manifest.intrinsics,
            vm.pose,
        )?);
    }
    Ok(Scene {
        name: manifest.name,
        shape: manifest.shape,
        gt_grid,
        gt_mesh,
        views,
        intrinsics: manifest.intrinsics,
        light_dir: Vector3::new(manifest.light_dir[0], manifest.light_dir[1], manifest.light_dir[2]),
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_spec(name: &str) -> SceneSpec {
        let mut spec = SceneSpec::new(name, Primitive::zoo("sphere").unwrap());
        // Smaller images keep the tests quick; geometry is unchanged.
        spec.intrinsics = Intrinsics::new(122.5, 122.5, 56.0, 56.0, 112, 112).unwrap();
        spec
    }

    #[test]
    fn generated_sphere_scene_is_analytically_consistent() {
        let scene = generate_scene(&sphere_spec("s"), 42).unwrap();
        assert_eq!(scene.views.len(), 5);
        let shape = &scene.shape;
        for view in &scene.views {
            let hits = view.mask.data().iter().filter(|&&m| m).count();
            assert!(hits > 0, "empty mask");
            for (x, y, &d) in view.depth.enumerate() {
                if !d.is_finite() {
                    continue;
                }
                let world = view
                    .pose_estimate
                    .transform_point(&(view.intrinsics.unproject_dir(x as f64, y as f64) * d));
                let err = shape.eval(&world).abs();
                assert!(err < 2.0 * scene.gt_grid.voxel_size(), "depth error {err}");
            }
        }
    }

    #[test]
    fn scene_generation_is_seed_deterministic() {
        let a = generate_scene(&sphere_spec("s"), 7).unwrap();
        let b = generate_scene(&sphere_spec("s"), 7).unwrap();
        assert_eq!(a.views.len(), b.views.len());
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va, vb);
        }
        assert_eq!(a.gt_grid, b.gt_grid);
        let c = generate_scene(&sphere_spec("s"), 8).unwrap();
        assert_ne!(a.views[0].pose_estimate, c.views[0].pose_estimate);
    }

    #[test]
    fn camera_inside_the_shape_is_rejected() {
        let mut spec = sphere_spec("s");
        spec.rig.radius = 0.2; // inside the r=0.4 sphere
        assert!(matches!(
            generate_scene(&spec, 1),
            Err(SceneError::Render(RenderError::CameraInsideSurface(_)))
        ));
    }

    #[test]
    fn zero_views_is_an_invalid_spec() {
        let mut spec = sphere_spec("s");
        spec.rig.num_views = 0;
        assert!(matches!(generate_scene(&spec, 1), Err(SceneError::InvalidSpec(_))));
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let scene = generate_scene(&sphere_spec("s"), 3).unwrap();
        let poses = scene.gt_poses();
        let noise = NoiseSpec::custom(0.0);
        let perturbed = perturb_poses(&poses, &noise, 11);
        for (a, b) in poses.iter().zip(&perturbed) {
            assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-15);
        }
    }

    #[test]
    fn sampled_twist_components_match_sigma() {
        let noise = NoiseSpec::level(NoiseLevel::L2);
        let twists = sample_noise_twists(100_000, &noise, 5);
        let mut sums = [0.0f64; 6];
        let mut sq = [0.0f64; 6];
        for t in &twists {
            let v = t.to_vector();
            for i in 0..6 {
                sums[i] += v[i];
                sq[i] += v[i] * v[i];
            }
        }
        let n = twists.len() as f64;
        for i in 0..6 {
            let mean = sums[i] / n;
            let std = (sq[i] / n - mean * mean).sqrt();
            let rel = (std - noise.sigma).abs() / noise.sigma;
            assert!(rel < 0.02, "component {i}: std {std} vs sigma {}", noise.sigma);
        }
    }

    #[test]
    fn perturbation_is_seed_deterministic_and_level_scaled() {
        let scene = generate_scene(&sphere_spec("s"), 9).unwrap();
        let poses = scene.gt_poses();
        let l1 = NoiseSpec::level(NoiseLevel::L1);
        let a = perturb_poses(&poses, &l1, 21);
        let b = perturb_poses(&poses, &l1, 21);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_homogeneous(), y.to_homogeneous());
        }
        assert_eq!(NoiseSpec::level(NoiseLevel::L1).sigma, 0.75e-2);
        assert_eq!(NoiseSpec::level(NoiseLevel::L2).sigma, 1.5e-2);
        assert_eq!(NoiseSpec::level(NoiseLevel::L3).sigma, 2.25e-2);
    }

    #[test]
    fn scene_bundle_round_trip() {
        let dir = std::env::temp_dir().join("fewview_scene_bundle");
        let _ = std::fs::remove_dir_all(&dir);
        let mut spec = sphere_spec("bundle");
        spec.grid = GridSpec::cube([0.0; 3], 0.55, 32);
        let scene = generate_scene(&spec, 123).unwrap();
        let written = save_scene_bundle(&scene, &dir).unwrap();
        assert!(written.iter().all(|p| p.exists()));
        let loaded = load_scene_bundle(&dir).unwrap();
        assert_eq!(loaded.name, scene.name);
        assert_eq!(loaded.seed, scene.seed);
        assert_eq!(loaded.views.len(), scene.views.len());
        for (a, b) in scene.views.iter().zip(&loaded.views) {
            // Depth survives the f32 file format; intensity is 8-bit PNG.
            assert_eq!(a.mask, b.mask);
            for (x, y, &d) in a.depth.enumerate() {
                let e = *b.depth.get(x, y);
                if d.is_finite() {
                    assert!((d - e).abs() < 1e-6, "depth {d} vs {e}");
                } else {
                    assert!(e.is_infinite());
                }
            }
            let pose_diff = (a.pose_estimate.to_homogeneous() - b.pose_estimate.to_homogeneous())
                .abs()
                .max();
            assert!(pose_diff < 1e-15);
        }
    }
}
