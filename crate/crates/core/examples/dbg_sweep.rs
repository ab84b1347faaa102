// debug: damping/prior sweep on the real alternation
use fewview::feature::analytic_features;
use fewview::geom::*;
use fewview::pose_refine::*;
use fewview::render::{render, shade_lambertian, RenderConfig};
use fewview::scenes::{generate_scene, perturb_poses, NoiseSpec, NoiseLevel, SceneSpec};
use fewview::sdf::GridSpec;
use fewview::sdf::Primitive;
use fewview::shape_update::{fuse_tsdf, ViewObservation};
use fewview::metrics::pixel_error;
use nalgebra::Vector3;

fn keep_channels(fm: &fewview::feature::FeatureMap, keep: &[usize]) -> fewview::feature::FeatureMap {
    let mut out = fm.clone();
    for c in 0..fm.channels() {
        if !keep.contains(&c) {
            for y in 0..fm.height() { for x in 0..fm.width() { out.set_value(c, x, y, 0.0); } }
        }
    }
    out
}

fn run(scene: &fewview::scenes::Scene, keep: &[usize], prior_scale: f64, noise: &NoiseSpec, seed: u64) -> Vec<f64> {
    let lambda_factor = 1e-3;
    let k = scene.intrinsics;
    let gt = scene.gt_poses();
    let mut poses = perturb_poses(&gt, noise, seed);
    let init = poses.clone();
    let samples: Vec<Vector3<f64>> = scene.gt_mesh.sample_surface(1000, 5).unwrap().iter().map(|(p,_)| *p).collect();
    let obs_feats: Vec<_> = scene.views.iter().map(|v| keep_channels(&analytic_features(&v.intensity, &v.mask, &v.depth).unwrap(), keep)).collect();
    let grid_spec = GridSpec::cube([0.0;3], 0.55, 48);
    let mean_err = |poses: &Vec<Pose>| -> f64 {
        poses.iter().zip(&gt).map(|(p,g)| pixel_error(p,g,&k,&samples).unwrap()).sum::<f64>() / poses.len() as f64
    };
    let mut curve = vec![mean_err(&poses)];
    for _outer in 0..3 {
        let views: Vec<ViewObservation> = scene.views.iter().zip(&poses).map(|(v,p)| v.with_pose(*p)).collect();
        let refs: Vec<&ViewObservation> = views.iter().collect();
        let grid = fuse_tsdf(&refs, &grid_spec, 4.0*grid_spec.voxel_size).unwrap();
        for _inner in 0..5 {
            for i in 0..poses.len() {
                let Ok(out) = render(&grid, &poses[i], &k, &RenderConfig::default()) else { continue };
                let shaded = shade_lambertian(&grid, &out, &scene.light_dir);
                let Ok(rend) = analytic_features(&shaded, &out.mask, &out.depth) else { continue };
                let rend = keep_channels(&rend, keep);
                let points: Vec<AlignPoint> = out.points.iter().map(|p| AlignPoint {
                    u: p.u as f64, v: p.v as f64,
                    p_cam: k.unproject_dir(p.u as f64, p.v as f64) * p.depth,
                }).collect();
                let prob = AlignmentProblem { observed: &obs_feats[i], rendered: &rend, points,
                    intrinsics: k, lm: LmConfig { damping: Damping::AutoScaled { factor: lambda_factor }, normal_equations: NormalEquations::Stacked },
                    prior_weight: prior_scale,
                    prior_pose: init[i], current_pose: poses[i] };
                if let Ok(up) = lm_step(&prob) { poses[i] = apply_update(&poses[i], &up.twist); }
            }
            curve.push(mean_err(&poses));
        }
    }
    curve
}

fn main() {
    let mut spec = SceneSpec::new("dbg", Primitive::zoo("sphere").unwrap());
    spec.intrinsics = Intrinsics::new(122.5, 122.5, 56.0, 56.0, 112, 112).unwrap();
    spec.grid = GridSpec::cube([0.0;3], 0.55, 48);
    let scene = generate_scene(&spec, 7).unwrap();
    let l3 = NoiseSpec::level(NoiseLevel::L3);
    for pw in [0.0, 0.1, 0.3, 1.0, 3.0] {
        for seed in [11u64, 21, 31] {
            let c = run(&scene, &[0,1,2,3], pw, &l3, seed);
            let s: Vec<String> = c.iter().step_by(3).map(|v| format!("{v:.2}")).collect();
            println!("prior {pw:<4} seed {seed}: {}", s.join(" -> "));
        }
    }
}
