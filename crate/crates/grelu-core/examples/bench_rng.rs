use grelu_core::rng::RngStream;
use std::time::Instant;

fn main() {
    let mut g = RngStream::new(1, 0).gaussian_source();
    let n = 20_000_000usize;
    let mut buf = vec![0.0f64; n];
    let t0 = Instant::now();
    g.fill_standard_normal(&mut buf);
    let dt = t0.elapsed().as_secs_f64();
    println!("{} draws in {:.2}s = {:.1} ns/draw (sum {})", n, dt, dt / n as f64 * 1e9, buf.iter().sum::<f64>());
}
