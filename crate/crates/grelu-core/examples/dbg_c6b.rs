use grelu_core::data::gen_ackley;
use grelu_core::model::{compute_gates_all, init_network, NetworkShape};
use grelu_core::theory::{descent_rate_check, SpectralBounds};
use grelu_core::train::{train_grelu, theoretical_lr, LearningRate, TrainConfig};

fn main() {
    let shape = NetworkShape::new(8, 1, 768, 3);
    let eta = theoretical_lr(&shape, 16);
    for seed in 0..12u64 {
        let ds = gen_ackley(16, 8, 61 + seed).unwrap();
        let net = init_network(shape, 1061 + seed);
        let gates = compute_gates_all(&net, &ds.x).unwrap();
        let cfg = TrainConfig::new(LearningRate::Theoretical, 1500, 1e-6);
        let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        let bounds = SpectralBounds::for_shape(&shape);
        let frac = descent_rate_check(&log, bounds.alpha(), 3, eta).unwrap();
        let peak = log.rows.iter().map(|r| r.loss).fold(0.0f64, f64::max);
        println!("seed {seed}: steps {} frac {:.4} l0 {:.1} peak {:.3e}", log.rows.len()-1, frac, log.rows[0].loss, peak);
    }
}
