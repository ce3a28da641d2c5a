use grelu_core::data::gen_ackley;
use grelu_core::model::{compute_gates_all, init_network, NetworkShape};
use grelu_core::train::{train_grelu, LearningRate, TrainConfig};
use std::time::Instant;

fn main() {
    let ds = gen_ackley(16, 8, 7).unwrap();
    let net = init_network(NetworkShape::new(8, 1, 768, 3), 1);
    let gates = compute_gates_all(&net, &ds.x).unwrap();
    let eta = grelu_core::train::theoretical_lr(&net.shape, 16);
    let t0 = Instant::now();
    let cfg = TrainConfig::new(LearningRate::Fixed(eta), 1000, 1e-12);
    let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let last = log.rows.last().unwrap();
    println!("1000 iters m=768: {:.2}s ({:.1} us/iter), loss {} -> {:.3e}, tau {:.4}, outcome {:?}",
        dt, dt * 1e3, log.rows[0].loss, last.loss, last.tau, log.outcome);
}
