// debug: coherent (gauge) noise floor of the L3 draws
use fewview::geom::*;
use fewview::metrics::pixel_error;
use fewview::scenes::*;
use fewview::sdf::Primitive;
use nalgebra::Vector3;

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(f64::total_cmp); v[v.len()/2] }

fn main() {
    let shapes = Primitive::zoo_names();
    let mut init_err = Vec::new();
    let mut coh_err = Vec::new();
    for i in 0..20usize {
        let spec = SceneSpec::new(format!("s{i}"), Primitive::zoo(shapes[i % shapes.len()]).unwrap());
        let scene = generate_scene(&spec, 1000 + i as u64).unwrap();
        let gt = scene.gt_poses();
        let samples: Vec<Vector3<f64>> = scene.gt_mesh.sample_surface(1000, 5).unwrap().iter().map(|(p,_)| *p).collect();
        let noise = NoiseSpec::level(NoiseLevel::L3);
        let twists = sample_noise_twists(gt.len(), &noise, 9000 + i as u64);
        let noisy: Vec<Pose> = gt.iter().zip(&twists).map(|(p, xi)| exp_map(xi).compose(p)).collect();
        // Coherent component: the mean twist applied to every pose.
        let mean_twist = {
            let mut acc = nalgebra::Vector6::zeros();
            for t in &twists { acc += t.to_vector(); }
            Twist::from_vector(&(acc / twists.len() as f64))
        };
        let coherent: Vec<Pose> = gt.iter().map(|p| exp_map(&mean_twist).compose(p)).collect();
        let err = |poses: &[Pose]| -> f64 {
            poses.iter().zip(&gt).map(|(p, g)| pixel_error(p, g, &scene.intrinsics, &samples).unwrap()).sum::<f64>() / poses.len() as f64
        };
        init_err.push(err(&noisy));
        coh_err.push(err(&coherent));
    }
    println!("median init {:.3}  median coherent-only {:.3}  ratio {:.3}",
        median(init_err.clone()), median(coh_err.clone()), median(coh_err)/median(init_err));
}
