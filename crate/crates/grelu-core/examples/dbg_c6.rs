use grelu_core::data::gen_ackley;
use grelu_core::model::{compute_gates_all, init_network, NetworkShape};
use grelu_core::train::{train_grelu, LearningRate, TrainConfig};

fn main() {
    let ds = gen_ackley(16, 8, 61).unwrap();
    let net = init_network(NetworkShape::new(8, 1, 768, 3), 1061);
    let gates = compute_gates_all(&net, &ds.x).unwrap();
    let cfg = TrainConfig::new(LearningRate::Theoretical, 1500, 1e-6);
    let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
    println!("eta {} rows {}", log.eta, log.rows.len());
    for r in log.rows.iter().take(40) {
        println!("iter {:4} loss {:.6e} ratio {:.6}", r.iter, r.loss, if r.iter > 0 { r.loss } else { f64::NAN } / log.rows[r.iter.saturating_sub(1)].loss);
    }
}
