// pilot: criteria 6/7 statistics over 20 scenes at the production rig
use fewview::geom::Pose;
use fewview::joint::{reconstruct, reconstruct_no_joint, AlternationConfig};
use fewview::mesh::extract_mesh;
use fewview::metrics::*;
use fewview::scenes::*;
use fewview::sdf::Primitive;
use nalgebra::Vector3;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let shapes = Primitive::zoo_names();
    let scenes: Vec<Scene> = (0..20).map(|i| {
        let spec = SceneSpec::new(format!("s{i}"), Primitive::zoo(shapes[i % shapes.len()]).unwrap());
        generate_scene(&spec, 1000 + i as u64).unwrap()
    }).collect();
    println!("scene gen: {:?}", t0.elapsed());

    let variants: Vec<(&str, AlternationConfig)> = vec![
        ("twist2e-3 ", AlternationConfig { convergence: fewview::joint::Convergence::TwistNorm(2e-3), ..Default::default() }),
        ("twist5e-3 ", AlternationConfig { convergence: fewview::joint::Convergence::TwistNorm(5e-3), ..Default::default() }),
        ("pix0.2    ", AlternationConfig { convergence: fewview::joint::Convergence::PixelMotion(0.2), ..Default::default() }),
        ("pix0.4    ", AlternationConfig { convergence: fewview::joint::Convergence::PixelMotion(0.4), ..Default::default() }),
    ];
    for (vname, cfg) in &variants {
        let cfg = cfg.clone();
        run_variant(vname, &scenes, &cfg);
    }
}

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(f64::total_cmp); v[v.len()/2] }

fn run_variant(vname: &str, scenes: &[Scene], cfg: &AlternationConfig) {

    // criterion 7: joint vs no-joint at L3
    let t1 = Instant::now();
    let mut init_px = Vec::new();
    let mut final_px = Vec::new();
    let mut iou_nj = Vec::new();
    let mut iou_joint = Vec::new();
    for (i, sc) in scenes.iter().enumerate() {
        let noisy = perturb_poses(&sc.gt_poses(), &NoiseSpec::level(NoiseLevel::L3), 9000 + i as u64);
        let samples: Vec<Vector3<f64>> = sc.gt_mesh.sample_surface(1000, 5).unwrap().iter().map(|(p,_)| *p).collect();
        let err = |poses: &[Pose]| -> f64 {
            poses.iter().zip(sc.gt_poses()).filter_map(|(p, g)| pixel_error(p, &g, &sc.intrinsics, &samples).ok()).sum::<f64>() / poses.len() as f64
        };
        let (grid_nj, _) = reconstruct_no_joint(sc, &noisy, &cfg).unwrap();
        let (grid_j, poses_j, _trace) = reconstruct(sc, &noisy, &cfg).unwrap();
        init_px.push(err(&noisy));
        final_px.push(err(&poses_j));
        let bounds = sc.gt_grid.bounds();
        let iou_of = |grid: &fewview::sdf::SdfGrid| {
            // similarity-aligned IoU via mesh alignment
            let mesh = extract_mesh(grid, 0.0).unwrap();
            let pred_pts: Vec<Vector3<f64>> = mesh.sample_surface(4000, 17).unwrap().iter().map(|(p,_)| *p).collect();
            let gt_pts: Vec<Vector3<f64>> = sc.gt_mesh.sample_surface(4000, 18).unwrap().iter().map(|(p,_)| *p).collect();
            let sim = align_similarity(&pred_pts, &gt_pts, 30).unwrap();
            let aligned = sim.apply_mesh(&mesh);
            let occ = MeshOccupancy::build(&aligned);
            volumetric_iou(Occupancy::Mesh(&occ), Occupancy::Grid(&sc.gt_grid), bounds, 30_000, 19).unwrap()
        };
        iou_nj.push(iou_of(&grid_nj));
        iou_joint.push(iou_of(&grid_j));
    }
    println!("c7 (20 scenes, L3): {:?}", t1.elapsed());
    println!("{vname} init px median {:.3}  final px median {:.3}  (need final < 0.5*init)", median(init_px.clone()), median(final_px.clone()));
    println!("  iou no-joint median {:.3}  joint median {:.3}", median(iou_nj.clone()), median(iou_joint.clone()));

    // criterion 7b: L1 monotonicity fraction
    let mut non_increasing = 0;
    let n_trials = 20;
    for (i, sc) in scenes.iter().enumerate() {
        let noisy = perturb_poses(&sc.gt_poses(), &NoiseSpec::level(NoiseLevel::L1), 11_000 + i as u64);
        let (_, _, trace) = reconstruct(sc, &noisy, &cfg).unwrap();
        let errs: Vec<f64> = trace.records.iter().map(|r| r.median_pixel_error.unwrap()).collect();
        let mono = errs.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        if mono { non_increasing += 1; }
    }
    println!("{vname} c7b: {non_increasing}/{n_trials} L1 non-increasing");
}
