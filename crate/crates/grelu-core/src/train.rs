//! Squared loss, closed-form layer gradients, and full-batch gradient descent.
//!
//! For the gated network the gradient of the half-sum-of-squares loss with
//! respect to layer `k` is the accumulated outer product
//! `sum_i (F_{k+1}^T r_i)(G_{k-1} x_i)^T`, where `r_i` is the residual of
//! example `i`. Both factor families come out of one forward and one backward
//! sweep, so a training step is a handful of `m x m` by `m x n` products.
//! Examples are accumulated in fixed order, which keeps runs bit-identical.
//!
//! The ReLU baseline trains by subgradient descent with masks recomputed at
//! every forward pass; the subgradient at zero is zero.

use crate::data::Dataset;
use crate::matrix::Matrix;
use crate::model::{GReluNetwork, GatePattern, ModelError, NetworkShape, ReluNetwork};
use core::fmt;
use std::time::Instant;

/// Training aborts when the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// The analytic schedule `d_x / (n^4 L^3 d_y)`.
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: LearningRate,
    pub max_iters: usize,
    pub target_loss: f64,
    /// Recorded for provenance; the GD loop itself is deterministic.
    pub seed: u64,
    pub log_every: usize,
    /// Fixed-order reductions are always used; this additionally zeroes the
    /// wall-clock column so logs become byte-identical across runs.
    pub deterministic_reduction: bool,
}

impl TrainConfig {
    pub fn new(lr: LearningRate, max_iters: usize, target_loss: f64) -> Self {
        TrainConfig { lr, max_iters, target_loss, seed: 0, log_every: 1, deterministic_reduction: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainOutcome {
    TargetReached,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss: f64,
    /// Frobenius norm of the concatenated layer gradients.
    pub grad_norm: f64,
    /// Norm of the difference between this iteration's gradient and the
    /// previous one (0 at iteration 0).
    pub grad_tdiff: f64,
    /// Running maximum spectral drift of any layer from initialization,
    /// refreshed at log points.
    pub tau: f64,
    pub eta: f64,
    pub wall_ms: u64,
    /// Mask drift against the previous log point; only for ReLU runs.
    pub hamming: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub eta: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    InvalidEta(f64),
    /// The divergence guard tripped; the partial log is preserved.
    Diverged { iter: usize, loss: f64, initial_loss: f64, log: TrainLog },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::InvalidEta(v) => write!(f, "learning rate must be finite and >= 0, got {v}"),
            TrainError::Diverged { iter, loss, initial_loss, .. } => {
                write!(f, "divergence guard: loss {loss:e} at iteration {iter} exceeds 1e6 x initial {initial_loss:e}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

/// `eta = d_x / (n^4 L^3 d_y)`.
pub fn theoretical_lr(shape: &NetworkShape, n: usize) -> f64 {
    assert!(n >= 1);
    shape.d_x as f64 / ((n as f64).powi(4) * (shape.depth as f64).powi(3) * shape.d_y as f64)
}

pub fn resolve_lr(lr: LearningRate, shape: &NetworkShape, n: usize) -> Result<f64, TrainError> {
    let eta = match lr {
        LearningRate::Fixed(v) => v,
        LearningRate::Theoretical => theoretical_lr(shape, n),
    };
    if !eta.is_finite() || eta < 0.0 {
        return Err(TrainError::InvalidEta(eta));
    }
    Ok(eta)
}

fn check_gates(gates: &GatePattern, ds: &Dataset) -> Result<(), ModelError> {
    if gates.examples() != ds.n() {
        return Err(ModelError::GateCountMismatch { gates: gates.examples(), examples: ds.n() });
    }
    Ok(())
}

/// Fixed per-run batch quantities for the gated network.
struct GreluBatch {
    /// `C X^T`, `m x n`; frozen, so computed once.
    cxt: Matrix,
    /// `Y^T`, `d_y x n`.
    yt: Matrix,
    /// Dense 0/1 masks per layer, `m x n`.
    masks: Vec<Matrix>,
}

impl GreluBatch {
    fn new(net: &GReluNetwork, gates: &GatePattern, ds: &Dataset) -> Self {
        let cxt = net.c.matmul_t(&ds.x);
        let yt = ds.y.transpose();
        let masks = (0..=net.shape.depth).map(|k| gates.mask_matrix(k)).collect();
        GreluBatch { cxt, yt, masks }
    }

    /// Loss, per-layer gradients and hidden feature maps at the given weights.
    fn evaluate(&self, net: &GReluNetwork) -> (f64, Vec<Matrix>, Vec<Matrix>) {
        let depth = net.shape.depth;
        let mut hidden = Vec::with_capacity(depth + 1);
        let mut h = self.cxt.clone();
        h.hadamard_in_place(&self.masks[0]);
        hidden.push(h);
        for k in 0..depth {
            let mut next = net.w[k].matmul(&hidden[k]);
            next.hadamard_in_place(&self.masks[k + 1]);
            hidden.push(next);
        }
        let residual = net.b.matmul(&hidden[depth]).sub(&self.yt);
        let loss = 0.5 * residual.frobenius_dot(&residual);

        let mut carriers = vec![Matrix::zeros(0, 0); depth + 1];
        let mut v = net.b.t_matmul(&residual);
        v.hadamard_in_place(&self.masks[depth]);
        carriers[depth] = v;
        for k in (0..depth).rev() {
            let mut v = net.w[k].t_matmul(&carriers[k + 1]);
            v.hadamard_in_place(&self.masks[k]);
            carriers[k] = v;
        }
        let grads = (0..depth).map(|k| carriers[k + 1].matmul_t(&hidden[k])).collect();
        (loss, grads, hidden)
    }
}

/// Training-set loss `1/2 sum_i ||output_i - y_i||^2` under fixed gates.
pub fn loss(net: &GReluNetwork, gates: &GatePattern, ds: &Dataset) -> Result<f64, ModelError> {
    check_gates(gates, ds)?;
    let batch = GreluBatch::new(net, gates, ds);
    Ok(batch.evaluate(net).0)
}

/// Post-gate hidden feature maps `H_0..H_L` over all examples, each `m x n`.
pub fn hidden_features(net: &GReluNetwork, gates: &GatePattern, ds: &Dataset) -> Result<Vec<Matrix>, ModelError> {
    check_gates(gates, ds)?;
    let batch = GreluBatch::new(net, gates, ds);
    Ok(batch.evaluate(net).2)
}

/// Analytic gradient of the loss for layer `k` (1-based, `1..=L`).
pub fn layer_gradient(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    k: usize,
) -> Result<Matrix, ModelError> {
    check_gates(gates, ds)?;
    let depth = net.shape.depth;
    if k < 1 || k > depth {
        return Err(ModelError::LayerIndexOutOfRange { index: k, min: 1, max: depth });
    }
    let batch = GreluBatch::new(net, gates, ds);
    let (_, mut grads, _) = batch.evaluate(net);
    Ok(grads.swap_remove(k - 1))
}

/// All layer gradients plus the loss, in one sweep.
pub fn all_layer_gradients(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
) -> Result<(f64, Vec<Matrix>), ModelError> {
    check_gates(gates, ds)?;
    let batch = GreluBatch::new(net, gates, ds);
    let (loss, grads, _) = batch.evaluate(net);
    Ok((loss, grads))
}

fn concat_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| {
        let f = g.frobenius_norm();
        f * f
    }).sum::<f64>().sqrt()
}

fn concat_diff_norm(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.sub(y).frobenius_norm();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Spectral norm with a warm-started power iteration; `v` carries the top
/// right singular vector between calls so per-step refreshes are cheap.
fn spectral_norm_warm(a: &Matrix, v: &mut Vec<f64>) -> f64 {
    let n = a.cols();
    if v.len() != n {
        *v = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
    }
    let mut sigma = 0.0f64;
    for it in 0..200 {
        let u = a.matvec(v);
        let w = a.t_matvec(&u);
        let norm = crate::matrix::norm2(&w);
        if norm == 0.0 {
            return 0.0;
        }
        let new_sigma = crate::matrix::norm2(&u);
        let inv = 1.0 / norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi * inv;
        }
        if it > 0 && (new_sigma - sigma).abs() <= 1e-9 * new_sigma.max(1e-300) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Running maximum of layer drifts from initialization, in spectral norm.
struct TauTracker {
    w0: Vec<Matrix>,
    warm: Vec<Vec<f64>>,
    tau: f64,
}

impl TauTracker {
    fn new(w0: Vec<Matrix>) -> Self {
        let layers = w0.len();
        TauTracker { w0, warm: vec![Vec::new(); layers], tau: 0.0 }
    }

    fn refresh(&mut self, w: &[Matrix]) -> f64 {
        for (k, wk) in w.iter().enumerate() {
            let delta = wk.sub(&self.w0[k]);
            // The Frobenius norm dominates the spectral norm, so a layer whose
            // Frobenius drift is below the current maximum cannot raise it.
            if delta.frobenius_norm() <= self.tau {
                continue;
            }
            let s = spectral_norm_warm(&delta, &mut self.warm[k]);
            if s > self.tau {
                self.tau = s;
            }
        }
        self.tau
    }
}

/// Full-batch gradient descent on the gated network with fixed gates.
///
/// Gates are computed once by the caller and reused every step. Stops when
/// the loss reaches `target_loss` or after `max_iters` steps; aborts with an
/// error if the loss exceeds [`DIVERGENCE_FACTOR`] times its initial value.
pub fn train_grelu(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(GReluNetwork, TrainLog), TrainError> {
    check_gates(gates, ds)?;
    let eta = resolve_lr(cfg.lr, &net.shape, ds.n())?;
    let batch = GreluBatch::new(net, gates, ds);
    let mut current = net.clone();
    run_gd(
        cfg,
        eta,
        |net_w| {
            let (loss, grads, _) = batch.evaluate(net_w);
            (loss, grads)
        },
        &mut current,
        |n| &mut n.w,
        |_| None,
    )
    .map(|log| (current, log))
}

/// Subgradient descent on the ReLU baseline; masks recomputed every forward.
pub fn train_relu(
    net: &ReluNetwork,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ReluNetwork, TrainLog), TrainError> {
    let eta = resolve_lr(cfg.lr, &net.shape, ds.n())?;
    let cxt = net.c.matmul_t(&ds.x);
    let yt = ds.y.transpose();
    let depth = net.shape.depth;

    let evaluate = |net_w: &ReluNetwork| {
        // forward: z_0 = C X^T, z_{k+1} = W_{k+1} relu(z_k); readout B z_L
        let mut pre = Vec::with_capacity(depth + 1);
        pre.push(cxt.clone());
        for k in 0..depth {
            let act = relu_of(&pre[k]);
            pre.push(net_w.w[k].matmul(&act));
        }
        let residual = net_w.b.matmul(&pre[depth]).sub(&yt);
        let loss = 0.5 * residual.frobenius_dot(&residual);
        // backward: delta_L = B^T R, delta_k = 1(z_k > 0) o (W_{k+1}^T delta_{k+1})
        let mut deltas = vec![Matrix::zeros(0, 0); depth + 1];
        deltas[depth] = net_w.b.t_matmul(&residual);
        for k in (0..depth).rev() {
            let mut d = net_w.w[k].t_matmul(&deltas[k + 1]);
            mask_by_sign(&mut d, &pre[k]);
            deltas[k] = d;
        }
        let grads = (0..depth).map(|k| deltas[k + 1].matmul_t(&relu_of(&pre[k]))).collect();
        (loss, grads)
    };

    let x = ds.x.clone();
    let mut current = net.clone();
    let mut prev_masks: Option<GatePattern> = None;
    run_gd(
        cfg,
        eta,
        evaluate,
        &mut current,
        |n| &mut n.w,
        |n| {
            // mean Hamming drift of the recomputed masks since the last log point
            let masks = crate::model::relu_masks_all(n, &x).expect("finite inputs");
            let drift = prev_masks.as_ref().map(|p| p.hamming_fraction(&masks)).unwrap_or(0.0);
            prev_masks = Some(masks);
            Some(drift)
        },
    )
    .map(|log| (current, log))
}

fn relu_of(z: &Matrix) -> Matrix {
    let mut a = z.clone();
    for v in a.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    a
}

fn mask_by_sign(target: &mut Matrix, sign_source: &Matrix) {
    for (t, s) in target.data_mut().iter_mut().zip(sign_source.data()) {
        if *s <= 0.0 {
            *t = 0.0;
        }
    }
}

/// Shared GD loop. `evaluate` returns loss and gradients at the current
/// weights; `weights_of` exposes the mutable trained layers; `hamming`
/// produces the optional mask-drift column at log points.
fn run_gd<N>(
    cfg: &TrainConfig,
    eta: f64,
    mut evaluate: impl FnMut(&N) -> (f64, Vec<Matrix>),
    current: &mut N,
    weights_of: impl Fn(&mut N) -> &mut Vec<Matrix>,
    mut hamming: impl FnMut(&N) -> Option<f64>,
) -> Result<TrainLog, TrainError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut prev_grads: Option<Vec<Matrix>> = None;
    let mut tau: Option<TauTracker> = None;
    let mut initial_loss = 0.0;
    let log_every = cfg.log_every.max(1);

    let mut t = 0usize;
    loop {
        let (loss, grads) = evaluate(current);
        if t == 0 {
            initial_loss = loss;
            tau = Some(TauTracker::new(weights_of(current).clone()));
        }
        let diverged = loss > DIVERGENCE_FACTOR * initial_loss && loss > initial_loss;
        let terminal = loss <= cfg.target_loss || t >= cfg.max_iters || diverged;

        if t % log_every == 0 || terminal {
            let tau_now = tau.as_mut().unwrap().refresh(weights_of(current));
            let wall_ms =
                if cfg.deterministic_reduction { 0 } else { start.elapsed().as_millis() as u64 };
            rows.push(TrainLogRow {
                iter: t,
                loss,
                grad_norm: concat_norm(&grads),
                grad_tdiff: prev_grads.as_ref().map(|p| concat_diff_norm(&grads, p)).unwrap_or(0.0),
                tau: tau_now,
                eta,
                wall_ms,
                hamming: hamming(current),
            });
        }
        if terminal {
            let outcome = if loss <= cfg.target_loss {
                TrainOutcome::TargetReached
            } else if diverged {
                return Err(TrainError::Diverged {
                    iter: t,
                    loss,
                    initial_loss,
                    log: TrainLog { rows, eta, outcome: TrainOutcome::IterationLimit },
                });
            } else {
                TrainOutcome::IterationLimit
            };
            return Ok(TrainLog { rows, eta, outcome });
        }
        for (w, g) in weights_of(current).iter_mut().zip(&grads) {
            w.axpy(-eta, g);
        }
        prev_grads = Some(grads);
        t += 1;
    }
}

/// Mean fraction of ReLU mask bits that differ between two same-shape
/// networks over a dataset.
pub fn hamming_activation_drift(
    a: &ReluNetwork,
    b: &ReluNetwork,
    ds: &Dataset,
) -> Result<f64, ModelError> {
    if a.shape != b.shape {
        return Err(ModelError::DimensionMismatch { expected: a.shape.m, got: b.shape.m });
    }
    let ma = crate::model::relu_masks_all(a, &ds.x)?;
    let mb = crate::model::relu_masks_all(b, &ds.x)?;
    Ok(ma.hamming_fraction(&mb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_ackley;
    use crate::model::{compute_gates_all, init_network};

    fn setup(m: usize, depth: usize, n: usize, d: usize, seed: u64) -> (GReluNetwork, GatePattern, Dataset) {
        let ds = gen_ackley(n, d, seed).unwrap();
        let net = init_network(NetworkShape::new(d, 1, m, depth), seed + 1);
        let gates = compute_gates_all(&net, &ds.x).unwrap();
        (net, gates, ds)
    }

    fn set_labels_to_outputs(net: &GReluNetwork, gates: &GatePattern, ds: &mut Dataset) {
        let hidden = hidden_features(net, gates, ds).unwrap();
        let out = net.b.matmul(hidden.last().unwrap());
        for i in 0..ds.n() {
            for p in 0..ds.d_y() {
                ds.y[(i, p)] = out[(p, i)];
            }
        }
    }

    #[test]
    fn loss_definitional_cases() {
        let (net, gates, ds) = setup(10, 2, 1, 4, 1);
        // single example, scalar output: loss = r^2 / 2
        let pass = crate::model::forward(&net, &gates, 0, ds.x.row(0)).unwrap();
        let r = pass.output[0] - ds.y[(0, 0)];
        let l = loss(&net, &gates, &ds).unwrap();
        assert!((l - r * r / 2.0).abs() < 1e-12 * l.max(1.0));

        // zero residuals -> 0: set labels to the network output, evaluated
        // through the same batched path so the residual is exactly zero
        let mut ds0 = ds.clone();
        set_labels_to_outputs(&net, &gates, &mut ds0);
        assert_eq!(loss(&net, &gates, &ds0).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_per_example_loop() {
        let (net, gates, ds) = setup(12, 3, 8, 5, 2);
        let mut oracle = 0.0;
        for i in 0..8 {
            let out = crate::model::forward(&net, &gates, i, ds.x.row(i)).unwrap().output;
            for (o, y) in out.iter().zip(ds.y.row(i)) {
                oracle += 0.5 * (o - y) * (o - y);
            }
        }
        let l = loss(&net, &gates, &ds).unwrap();
        assert!((l - oracle).abs() <= 1e-12 * oracle, "{l} vs {oracle}");
    }

    #[test]
    fn gradient_zero_at_zero_residual() {
        let (net, gates, mut ds) = setup(9, 2, 2, 4, 3);
        set_labels_to_outputs(&net, &gates, &mut ds);
        for k in 1..=2 {
            let g = layer_gradient(&net, &gates, &ds, k).unwrap();
            assert!(g.max_abs() < 1e-14);
        }
        assert!(layer_gradient(&net, &gates, &ds, 0).is_err());
        assert!(layer_gradient(&net, &gates, &ds, 3).is_err());
    }

    #[test]
    fn single_example_gradient_is_low_rank() {
        let (net, gates, ds) = setup(8, 2, 1, 4, 4);
        let g = layer_gradient(&net, &gates, &ds, 1).unwrap();
        // rank <= d_y = 1: all 2x2 minors vanish
        for i in 0..7 {
            for j in 0..7 {
                let det = g[(i, j)] * g[(i + 1, j + 1)] - g[(i, j + 1)] * g[(i + 1, j)];
                assert!(det.abs() < 1e-12 * g.max_abs().powi(2).max(1e-30));
            }
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (net, gates, ds) = setup(8, 3, 2, 3, 5);
        let step = 1e-6;
        let mut src = crate::rng::RngStream::new(99, 0).gaussian_source();
        for k in 1..=3 {
            let analytic = layer_gradient(&net, &gates, &ds, k).unwrap();
            for _ in 0..50 {
                let i = (src.next_standard_normal().abs() * 1e6) as usize % 8;
                let j = (src.next_standard_normal().abs() * 1e6) as usize % 8;
                let mut plus = net.clone();
                plus.w[k - 1][(i, j)] += step;
                let mut minus = net.clone();
                minus.w[k - 1][(i, j)] -= step;
                let fd = (loss(&plus, &gates, &ds).unwrap() - loss(&minus, &gates, &ds).unwrap())
                    / (2.0 * step);
                let a = analytic[(i, j)];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!((fd - a).abs() / denom < 1e-5, "layer {k} ({i},{j}): fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn theoretical_lr_formula() {
        let s = NetworkShape::new(8, 1, 768, 3);
        let eta = theoretical_lr(&s, 16);
        assert!((eta - 8.0 / (65536.0 * 27.0)).abs() < 1e-18);
        // doubling n divides eta by 16
        assert!((theoretical_lr(&s, 32) - eta / 16.0).abs() < 1e-20);
        let s2 = NetworkShape::new(200, 1, 40_000, 4);
        assert!((theoretical_lr(&s2, 100) - 3.125e-8).abs() < 1e-20);
    }

    #[test]
    fn zero_eta_keeps_everything_constant() {
        let (net, gates, ds) = setup(10, 2, 4, 5, 6);
        let cfg = TrainConfig { max_iters: 5, ..TrainConfig::new(LearningRate::Fixed(0.0), 5, 0.0) };
        let (trained, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        assert_eq!(trained.w, net.w);
        let first = log.rows.first().unwrap().loss;
        assert!(log.rows.iter().all(|r| r.loss == first));
        assert!(log.rows.iter().all(|r| r.tau == 0.0));
    }

    #[test]
    fn zero_iteration_run_logs_single_row() {
        let (net, gates, ds) = setup(10, 2, 4, 5, 7);
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-5), 0, 0.0);
        let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].iter, 0);
        assert_eq!(log.outcome, TrainOutcome::IterationLimit);
    }

    #[test]
    fn zero_residual_start_is_fixed_point() {
        let (net, gates, mut ds) = setup(9, 2, 3, 4, 8);
        set_labels_to_outputs(&net, &gates, &mut ds);
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-3), 10, 0.0);
        let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        assert_eq!(log.outcome, TrainOutcome::TargetReached);
        assert_eq!(log.rows.last().unwrap().loss, 0.0);
        assert_eq!(log.rows.last().unwrap().tau, 0.0);
    }

    #[test]
    fn small_step_never_increases_loss() {
        // 50 random instances, one step at eta = 1e-8
        for seed in 0..50 {
            let (net, gates, ds) = setup(8, 2, 3, 4, 100 + seed);
            let l0 = loss(&net, &gates, &ds).unwrap();
            let cfg = TrainConfig::new(LearningRate::Fixed(1e-8), 1, 0.0);
            let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
            let l1 = log.rows.last().unwrap().loss;
            assert!(l1 <= l0 + 1e-12, "seed {seed}: {l0} -> {l1}");
        }
    }

    #[test]
    fn determinism_byte_identical_logs() {
        let (net, gates, ds) = setup(16, 2, 6, 5, 9);
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-4), 40, 0.0);
        let (_, log_a) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        let (_, log_b) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn tau_is_nondecreasing_and_iters_increase() {
        let (net, gates, ds) = setup(16, 3, 6, 5, 10);
        let cfg = TrainConfig::new(LearningRate::Fixed(2e-4), 60, 0.0);
        let (_, log) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        for w in log.rows.windows(2) {
            assert!(w[1].iter > w[0].iter);
            assert!(w[1].tau >= w[0].tau);
        }
        assert!(log.rows.last().unwrap().tau > 0.0);
    }

    #[test]
    fn divergence_guard_trips_on_hot_rate() {
        // The stability edge for this instance is far below 1e-3, so the
        // guard must fire and preserve the partial log.
        let (net, gates, ds) = setup(64, 3, 8, 6, 11);
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-3), 5000, 0.0);
        match train_grelu(&net, &gates, &ds, &cfg) {
            Err(TrainError::Diverged { loss, initial_loss, log, .. }) => {
                assert!(loss > 1e6 * initial_loss);
                assert!(!log.rows.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn grelu_drift_is_zero_and_relu_drift_nonnegative() {
        let (net, gates, ds) = setup(24, 2, 6, 5, 12);
        // gated masks never move during training
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-4), 30, 0.0);
        let (trained, _) = train_grelu(&net, &gates, &ds, &cfg).unwrap();
        let gates_after = compute_gates_all(&trained, &ds.x).unwrap();
        assert_eq!(gates.hamming_fraction(&gates_after), 0.0);

        // identical relu nets -> 0; complemented masks -> 1 is exercised at
        // the pattern level
        let relu = ReluNetwork::from_parts(net.shape, net.c.clone(), net.b.clone(), net.w.clone());
        assert_eq!(hamming_activation_drift(&relu, &relu, &ds).unwrap(), 0.0);
        let (relu_t, log) = train_relu(&relu, &ds, &cfg).unwrap();
        let d = hamming_activation_drift(&relu, &relu_t, &ds).unwrap();
        assert!(d >= 0.0);
        assert!(log.rows.iter().all(|r| r.hamming.is_some()));
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let ds = gen_ackley(3, 4, 21).unwrap();
        let shape = NetworkShape::new(4, 1, 8, 3);
        let g = init_network(shape, 22);
        let relu = ReluNetwork::from_parts(shape, g.c.clone(), g.b.clone(), g.w.clone());
        let relu_loss = |net: &ReluNetwork| -> f64 {
            let mut total = 0.0;
            for i in 0..ds.n() {
                let out = crate::model::relu_forward(net, ds.x.row(i)).unwrap().output;
                for (o, y) in out.iter().zip(ds.y.row(i)) {
                    total += 0.5 * (o - y) * (o - y);
                }
            }
            total
        };
        // one GD step must match a finite-difference descent direction
        let cfg = TrainConfig::new(LearningRate::Fixed(1e-7), 1, 0.0);
        let (stepped, _) = train_relu(&relu, &ds, &cfg).unwrap();
        let step = 1e-6;
        for k in 0..3 {
            for (i, j) in [(0usize, 0usize), (3, 5), (7, 2)] {
                let mut plus = relu.clone();
                plus.w[k][(i, j)] += step;
                let mut minus = relu.clone();
                minus.w[k][(i, j)] -= step;
                let fd = (relu_loss(&plus) - relu_loss(&minus)) / (2.0 * step);
                let implied = (relu.w[k][(i, j)] - stepped.w[k][(i, j)]) / 1e-7;
                let denom = fd.abs().max(implied.abs()).max(1e-6);
                assert!((fd - implied).abs() / denom < 1e-4, "k={k} ({i},{j}): {fd} vs {implied}");
            }
        }
    }
}
