// debug: inner-step error evolution across fuse boundaries, one L1 scene
use fewview::feature::analytic_features;
use fewview::geom::*;
use fewview::pose_refine::*;
use fewview::render::{render, shade_lambertian, RenderConfig};
use fewview::scenes::*;
use fewview::sdf::{GridSpec, Primitive};
use fewview::shape_update::{fuse_tsdf, ViewObservation};
use fewview::metrics::pixel_error;
use nalgebra::Vector3;

fn main() {
    let shapes = Primitive::zoo_names();
    let i = 3usize;
    let spec = SceneSpec::new(format!("s{i}"), Primitive::zoo(shapes[i % shapes.len()]).unwrap());
    let scene = generate_scene(&spec, 1000 + i as u64).unwrap();
    let k = scene.intrinsics;
    let gt = scene.gt_poses();
    let mut poses = perturb_poses(&gt, &NoiseSpec::level(NoiseLevel::L1), 11_000 + i as u64);
    let init = poses.clone();
    let samples: Vec<Vector3<f64>> = scene.gt_mesh.sample_surface(1000, 5).unwrap().iter().map(|(p,_)| *p).collect();
    let obs_feats: Vec<_> = scene.views.iter().map(|v| analytic_features(&v.intensity, &v.mask, &v.depth).unwrap()).collect();
    let grid_spec = GridSpec::default_object();
    let per_view = |poses: &Vec<Pose>| -> Vec<f64> {
        poses.iter().zip(&gt).map(|(p,g)| pixel_error(p,g,&k,&samples).unwrap()).collect()
    };
    println!("init: {:?}", per_view(&poses).iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>());
    for outer in 0..3 {
        let views: Vec<ViewObservation> = scene.views.iter().zip(&poses).map(|(v,p)| v.with_pose(*p)).collect();
        let refs: Vec<&ViewObservation> = views.iter().collect();
        let grid = fuse_tsdf(&refs, &grid_spec, 4.0*grid_spec.voxel_size).unwrap();
        for inner in 0..5 {
            for vi in 0..poses.len() {
                let Ok(out) = render(&grid, &poses[vi], &k, &RenderConfig::default()) else { continue };
                let shaded = shade_lambertian(&grid, &out, &scene.light_dir);
                let Ok(rend) = analytic_features(&shaded, &out.mask, &out.depth) else { continue };
                let points: Vec<AlignPoint> = out.points.iter().map(|p| AlignPoint {
                    u: p.u as f64, v: p.v as f64,
                    p_cam: k.unproject_dir(p.u as f64, p.v as f64) * p.depth,
                }).collect();
                let prob = AlignmentProblem { observed: &obs_feats[vi], rendered: &rend, points,
                    intrinsics: k, lm: LmConfig::default(), prior_weight: 0.1,
                    prior_pose: init[vi], current_pose: poses[vi] };
                if let Ok(up) = lm_step(&prob) { poses[vi] = apply_update(&poses[vi], &up.twist); }
            }
            let pv = per_view(&poses);
            let mean = pv.iter().sum::<f64>() / pv.len() as f64;
            println!("outer {outer} inner {inner}: mean {mean:.3} | {:?}", pv.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>());
        }
    }
}
