use grelu_core::model::{compute_gates, init_network, NetworkShape, z_spectral_norm};
use grelu_core::theory::z_norm_report;
use grelu_core::model::compute_gates_all;
use grelu_core::matrix::Matrix;
use std::time::Instant;

fn main() {
    // init cost at m=2048 L=8
    let t0 = Instant::now();
    let net = init_network(NetworkShape::new(16, 1, 2048, 8), 1);
    println!("init m=2048 L=8: {:.2}s", t0.elapsed().as_secs_f64());

    let mut x = Matrix::zeros(1, 16);
    x[(0, 0)] = 1.0;
    let gates = compute_gates_all(&net, &x).unwrap();

    let t0 = Instant::now();
    let norm = z_spectral_norm(&net, &gates, 0, 8, 1).unwrap();
    println!("one z norm (gap 7): {:.2}s -> {:.3}", t0.elapsed().as_secs_f64(), norm);

    let t0 = Instant::now();
    let report = z_norm_report(&net, &gates, 1.0/3.0, false).unwrap();
    println!("full z report ({} pairs): {:.2}s, all pass: {}", report.records.len(), t0.elapsed().as_secs_f64(), report.all_pass());
    let max = report.records.iter().map(|r| r.measured).fold(0.0f64, f64::max);
    println!("max z norm {:.3} vs bound {:.3}", max, report.records[0].bound);

    // overlap probe cost at m=4096 L=3
    let t0 = Instant::now();
    let net = init_network(NetworkShape::new(16, 1, 4096, 3), 2);
    let mut xi = vec![0.0; 16]; xi[0] = 1.0;
    let mut xj = vec![0.0; 16]; xj[1] = 1.0;
    let ov = grelu_core::theory::gate_overlap(&net, &xi, &xj).unwrap();
    println!("overlap m=4096 (incl init): {:.2}s -> {:?}", t0.elapsed().as_secs_f64(), ov);
    let g = compute_gates(&net, &xi).unwrap();
    println!("open fractions: {:?}", (0..=3).map(|k| g.open_fraction(0, k)).collect::<Vec<_>>());
}
