// quick stage profiler
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use uvdnerf::*;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = synth::SceneSpec { rings: 10, segments: 20, n_frames: 4,
        rig: synth::CameraRig { count: 3, orbit_radius: 4.0, elevation: 0.3, image_size: 48, focal_rel: 1.1875 },
        eval_cams: 1, ..synth::SceneSpec::default() };
    let scene = synth::generate_scene(&spec).unwrap();
    let queries = intrinsic::SequenceQueries::new(scene.proxies.clone());
    let geom = field::GeometryContext::for_sequence(&queries);

    let hash = encoding::HashGridConfig { levels: 16, table_size: 1<<14, feature_dim: 2, n_min: 16, n_max: 1024 };
    let fcfg = field::FieldConfig { hash, offset_hash: hash, ..field::FieldConfig::defaults(field::CoordKind::UvD, 4) };
    let f = field::NeuralField::init(fcfg, &mut rng).unwrap();
    let mut state = f.make_sample_state();
    let mut tables = field::TableGradPair::zeros_like(&f);
    let mut dense = field::DenseGrads::zeros_like(&f);
    let mut scratch = field::BackwardScratch::for_field(&f);

    let n = 100_000usize;
    let pts: Vec<geom::Vec3> = (0..n).map(|_| geom::vec3(
        rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3))).collect();

    let t0 = Instant::now();
    let mut acc = 0.0;
    for &p in &pts { let s = geom.intrinsic(p, 1, field::CoordKind::UvD); acc += s.coord.as_slice()[0]; }
    println!("intrinsic query: {:.1} ns/sample (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    let coords: Vec<[f64;3]> = pts.iter().map(|&p| {
        let s = geom.intrinsic(p, 1, field::CoordKind::UvD);
        let c = s.coord.as_slice(); [c[0], c[1], c[2]] }).collect();

    let t0 = Instant::now();
    let mut acc = 0.0;
    for c in &coords { f.forward_sample(c, 1, &mut state); acc += state.sigma; }
    println!("forward_sample: {:.1} ns/sample (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    let t0 = Instant::now();
    for c in &coords {
        f.forward_sample(c, 1, &mut state);
        f.backward_sample(&state, 0.3, [0.1, -0.2, 0.05], &[0.001, 0.0, 0.0, 0.0], &mut tables, &mut dense, &mut scratch);
    }
    println!("fwd+bwd: {:.1} ns/sample", t0.elapsed().as_nanos() as f64 / n as f64);

    // encoder alone
    let mut out = vec![0.0; f.main_tables.output_dim()];
    let t0 = Instant::now();
    let mut acc = 0.0;
    for c in &coords { encoding::encode(c, &f.main_tables, &mut out); acc += out[0]; }
    println!("encode fwd: {:.1} ns/sample (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    let up: Vec<f64> = (0..out.len()).map(|_| 0.1).collect();
    let mut grads = encoding::TableGradients::zeros_like(&f.main_tables);
    let mut dz = [0.0; 3];
    let t0 = Instant::now();
    for c in &coords { encoding::encode_backward(c, &up, &f.main_tables, &mut grads, Some(&mut dz[..])); }
    println!("encode bwd+dz: {:.1} ns/sample", t0.elapsed().as_nanos() as f64 / n as f64);

    // mlp alone
    let enc: Vec<f64> = (0..32).map(|_| 0.1).collect();
    let mut cache = f.radiance_mlp.make_cache();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n { let o = f.radiance_mlp.forward_cached(&enc, &mut cache); acc += o[0]; }
    println!("rad mlp fwd: {:.1} ns/sample (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    let mut mg = mlp::MlpGradients::zeros_like(&f.radiance_mlp);
    let mut dx = vec![0.0; 32];
    let mut ms = mlp::MlpBackScratch::default();
    let t0 = Instant::now();
    for _ in 0..n { f.radiance_mlp.backward_scratched(&cache, &[0.1, 0.2, 0.3, 0.4], &mut mg, &mut dx, &mut ms); }
    println!("rad mlp bwd: {:.1} ns/sample", t0.elapsed().as_nanos() as f64 / n as f64);
}
