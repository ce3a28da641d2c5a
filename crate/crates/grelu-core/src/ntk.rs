//! Explicit finite-width tangent kernels for the gated network.
//!
//! Because gates never depend on the trained layers, the per-layer gradient
//! of output `p` at input `x` is exactly the rank-one outer product
//! `(F_{k+1}^T e_p)(G_{k-1} x)^T`, and the kernel over a dataset is a sum of
//! entrywise products of two Gram factors per layer. Kernels are computed per
//! output index; the full multi-output kernel is the block-diagonal
//! collection.

use crate::data::Dataset;
use crate::matrix::{dot, Matrix};
use crate::model::{
    backward_vectors, compute_gates, forward, GReluNetwork, GatePattern, ModelError, NetworkShape,
};
use crate::rng::RngStream;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum NtkError {
    Model(ModelError),
    OutputIndexOutOfRange { p: usize, d_y: usize },
    PerturbationBoundViolated { layer: usize, norm: f64, bound: f64 },
    PerturbationCountMismatch { got: usize, depth: usize },
    FrozenPartsDiffer,
    DegenerateKernel { example: usize },
    GateCountMismatch { gates: usize, examples: usize },
}

impl fmt::Display for NtkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NtkError::Model(e) => write!(f, "{e}"),
            NtkError::OutputIndexOutOfRange { p, d_y } => {
                write!(f, "output index p={p} outside 1..={d_y}")
            }
            NtkError::PerturbationBoundViolated { layer, norm, bound } => {
                write!(f, "perturbation of layer {layer} has spectral norm {norm:e} > bound {bound:e}")
            }
            NtkError::PerturbationCountMismatch { got, depth } => {
                write!(f, "got {got} perturbation blocks for depth {depth}")
            }
            NtkError::FrozenPartsDiffer => write!(f, "networks do not share frozen C and B"),
            NtkError::DegenerateKernel { example } => {
                write!(f, "kernel diagonal entry for example {example} is not positive")
            }
            NtkError::GateCountMismatch { gates, examples } => {
                write!(f, "gate pattern covers {gates} examples, dataset has {examples}")
            }
        }
    }
}

impl std::error::Error for NtkError {}

impl From<ModelError> for NtkError {
    fn from(e: ModelError) -> Self {
        NtkError::Model(e)
    }
}

/// Kernel matrix for one output index (1-based `p`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub p: usize,
    pub k: Matrix,
}

fn check_p(p: usize, d_y: usize) -> Result<(), NtkError> {
    if p < 1 || p > d_y {
        return Err(NtkError::OutputIndexOutOfRange { p, d_y });
    }
    Ok(())
}

fn unit_output(d_y: usize, p: usize) -> Vec<f64> {
    let mut e = vec![0.0; d_y];
    e[p - 1] = 1.0;
    e
}

/// Rank-one factors `(u_k, h_{k-1})` with `u_k = F_{k+1}^T e_p`, so that the
/// layer-`k` gradient of output `p` is `u_k h_{k-1}^T`.
fn gradient_factors(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    x: &[f64],
    p: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), NtkError> {
    check_p(p, net.shape.d_y)?;
    let pass = forward(net, gates, example, x)?;
    let carriers = backward_vectors(net, gates, example, &unit_output(net.shape.d_y, p));
    Ok((carriers, pass.hidden))
}

/// Per-layer gradients `d y_p / d W_k` as explicit matrices, `k = 1..=L`.
pub fn grad_wrt_layers(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    x: &[f64],
    p: usize,
) -> Result<Vec<Matrix>, NtkError> {
    let (carriers, hidden) = gradient_factors(net, gates, example, x, p)?;
    let m = net.shape.m;
    Ok((1..=net.shape.depth)
        .map(|k| {
            let mut g = Matrix::zeros(m, m);
            g.rank_one_update(1.0, &carriers[k], &hidden[k - 1]);
            g
        })
        .collect())
}

/// Tangent kernel `K_p(x_i, x_j) = sum_k <u_k^i, u_k^j><h_{k-1}^i, h_{k-1}^j>`
/// over the dataset; exactly symmetric by construction.
pub fn ntk_kernel(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    p: usize,
) -> Result<KernelMatrix, NtkError> {
    check_p(p, net.shape.d_y)?;
    if gates.examples() != ds.n() {
        return Err(NtkError::GateCountMismatch { gates: gates.examples(), examples: ds.n() });
    }
    let n = ds.n();
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        factors.push(gradient_factors(net, gates, i, ds.x.row(i), p)?);
    }
    let depth = net.shape.depth;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (ui, hi) = &factors[i];
            let (uj, hj) = &factors[j];
            let mut val = 0.0;
            for layer in 1..=depth {
                val += dot(&ui[layer], &uj[layer]) * dot(&hi[layer - 1], &hj[layer - 1]);
            }
            k[(i, j)] = val;
            k[(j, i)] = val;
        }
    }
    Ok(KernelMatrix { p, k })
}

/// Per-layer kernels whose sum is the full kernel; each is the entrywise
/// product of two Gram matrices and therefore positive semidefinite.
pub fn ntk_layer_kernels(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    p: usize,
) -> Result<Vec<Matrix>, NtkError> {
    check_p(p, net.shape.d_y)?;
    let n = ds.n();
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        factors.push(gradient_factors(net, gates, i, ds.x.row(i), p)?);
    }
    let mut out = Vec::with_capacity(net.shape.depth);
    for layer in 1..=net.shape.depth {
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let (ui, hi) = &factors[i];
                let (uj, hj) = &factors[j];
                let val = dot(&ui[layer], &uj[layer]) * dot(&hi[layer - 1], &hj[layer - 1]);
                k[(i, j)] = val;
                k[(j, i)] = val;
            }
        }
        out.push(k);
    }
    Ok(out)
}

/// Relative deviation of the gradient at perturbed weights from the gradient
/// at the base weights, with gates held at the base pattern:
/// `||grad y_p(x, W + W') - grad y_p(x, W)||_F / ||grad y_p(x, W)||_F`.
///
/// Each perturbation block must satisfy `||W'_k||_2 <= xi / L`.
pub fn ntk_ratio(
    net: &GReluNetwork,
    perturbations: &[Matrix],
    x: &[f64],
    p: usize,
    xi: f64,
) -> Result<f64, NtkError> {
    let depth = net.shape.depth;
    if perturbations.len() != depth {
        return Err(NtkError::PerturbationCountMismatch { got: perturbations.len(), depth });
    }
    let bound = xi / depth as f64;
    for (k, w) in perturbations.iter().enumerate() {
        let norm = crate::linalg::spectral_norm(w);
        if norm > bound * (1.0 + 1e-9) {
            return Err(NtkError::PerturbationBoundViolated { layer: k + 1, norm, bound });
        }
    }
    // Gates depend only on (C, Psi, x); the perturbed net keeps the pattern.
    let gates = compute_gates(net, x)?;
    let (u0, h0) = gradient_factors(net, &gates, 0, x, p)?;
    let perturbed = net.with_weights(
        net.w.iter().zip(perturbations).map(|(w, d)| {
            let mut s = w.clone();
            s.axpy(1.0, d);
            s
        }).collect(),
    );
    let (u1, h1) = gradient_factors(&perturbed, &gates, 0, x, p)?;

    let mut num_sq = 0.0;
    let mut den_sq = 0.0;
    for k in 1..=depth {
        let (a0, b0) = (&u0[k], &h0[k - 1]);
        let (a1, b1) = (&u1[k], &h1[k - 1]);
        // ||a1 b1^T - a0 b0^T||_F^2 expanded in inner products
        num_sq += dot(a1, a1) * dot(b1, b1) - 2.0 * dot(a1, a0) * dot(b1, b0)
            + dot(a0, a0) * dot(b0, b0);
        den_sq += dot(a0, a0) * dot(b0, b0);
    }
    if den_sq <= 0.0 {
        return Err(NtkError::DegenerateKernel { example: 0 });
    }
    Ok((num_sq.max(0.0) / den_sq).sqrt())
}

/// Max normalized entry deviation between the kernel at trained weights and
/// the kernel at initialization:
/// `max_{i,j} |K_t(i,j) - K_1(i,j)| / sqrt(K_1(i,i) K_1(j,j))`.
pub fn kernel_drift(
    net_init: &GReluNetwork,
    net_t: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    p: usize,
) -> Result<f64, NtkError> {
    if net_init.c != net_t.c || net_init.b != net_t.b || net_init.psi != net_t.psi {
        return Err(NtkError::FrozenPartsDiffer);
    }
    let k1 = ntk_kernel(net_init, gates, ds, p)?.k;
    let kt = ntk_kernel(net_t, gates, ds, p)?.k;
    let n = ds.n();
    for i in 0..n {
        if !(k1[(i, i)] > 0.0) {
            return Err(NtkError::DegenerateKernel { example: i });
        }
    }
    let mut drift = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let denom = (k1[(i, i)] * k1[(j, j)]).sqrt();
            drift = drift.max((kt[(i, j)] - k1[(i, j)]).abs() / denom);
        }
    }
    Ok(drift)
}

/// Random per-layer perturbations with exact spectral norm `xi / L`,
/// reproducible from the seed.
pub fn random_spectral_perturbations(shape: &NetworkShape, xi: f64, seed: u64) -> Vec<Matrix> {
    let target = xi / shape.depth as f64;
    (0..shape.depth)
        .map(|k| {
            let mut p = crate::linalg::gaussian_matrix(
                shape.m,
                shape.m,
                1.0 / shape.m as f64,
                &RngStream::new(seed, k as u64),
            )
            .unwrap();
            let norm = crate::linalg::spectral_norm(&p);
            p.scale(target / norm);
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ackley, Dataset};
    use crate::linalg::sym_eig_extremes;
    use crate::model::{compute_gates_all, init_network};

    fn setup(m: usize, depth: usize, n: usize, d: usize, seed: u64) -> (GReluNetwork, GatePattern, Dataset) {
        let ds = gen_ackley(n, d, seed).unwrap();
        let net = init_network(NetworkShape::new(d, 1, m, depth), seed + 1);
        let gates = compute_gates_all(&net, &ds.x).unwrap();
        (net, gates, ds)
    }

    #[test]
    fn zero_input_gives_zero_gradients() {
        let net = init_network(NetworkShape::new(4, 2, 10, 2), 1);
        let gates = compute_gates(&net, &[0.0; 4]).unwrap();
        let grads = grad_wrt_layers(&net, &gates, 0, &[0.0; 4], 1).unwrap();
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));
        assert!(grad_wrt_layers(&net, &gates, 0, &[0.0; 4], 3).is_err());
        assert!(grad_wrt_layers(&net, &gates, 0, &[0.0; 4], 0).is_err());
    }

    #[test]
    fn layer_gradients_are_rank_one() {
        let (net, gates, ds) = setup(12, 3, 2, 4, 2);
        let grads = grad_wrt_layers(&net, &gates, 0, ds.x.row(0), 1).unwrap();
        for g in &grads {
            for i in 0..g.rows() - 1 {
                for j in 0..g.cols() - 1 {
                    let det = g[(i, j)] * g[(i + 1, j + 1)] - g[(i, j + 1)] * g[(i + 1, j)];
                    assert!(det.abs() <= 1e-12 * g.max_abs().powi(2).max(1e-30));
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (net, gates, ds) = setup(16, 2, 2, 4, 3);
        let x = ds.x.row(0);
        let grads = grad_wrt_layers(&net, &gates, 0, x, 1).unwrap();
        let y_p = |net: &GReluNetwork| forward(net, &gates, 0, x).unwrap().output[0];
        let step = 1e-6;
        for k in 0..2usize {
            for (i, j) in [(0usize, 1usize), (5, 7), (12, 3), (9, 9)] {
                let mut plus = net.clone();
                plus.w[k][(i, j)] += step;
                let mut minus = net.clone();
                minus.w[k][(i, j)] -= step;
                let fd = (y_p(&plus) - y_p(&minus)) / (2.0 * step);
                let a = grads[k][(i, j)];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!((fd - a).abs() / denom < 1e-5, "layer {} ({i},{j}): {fd} vs {a}", k + 1);
            }
        }
    }

    #[test]
    fn kernel_symmetric_diagonal_and_oracle() {
        let (net, gates, ds) = setup(16, 2, 4, 4, 4);
        let kernel = ntk_kernel(&net, &gates, &ds, 1).unwrap().k;
        // exact symmetry (bit-identical mirroring)
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(kernel[(i, j)], kernel[(j, i)]);
            }
        }
        // diagonal identity and brute-force flattened-gradient oracle
        for i in 0..4 {
            let gi = grad_wrt_layers(&net, &gates, i, ds.x.row(i), 1).unwrap();
            for j in i..4 {
                let gj = grad_wrt_layers(&net, &gates, j, ds.x.row(j), 1).unwrap();
                let brute: f64 = gi.iter().zip(&gj).map(|(a, b)| a.frobenius_dot(b)).sum();
                let rel = (kernel[(i, j)] - brute).abs() / brute.abs().max(1e-12);
                assert!(rel < 1e-10, "({i},{j}): {} vs {brute}", kernel[(i, j)]);
            }
        }
    }

    #[test]
    fn kernel_is_psd_and_layer_decomposed() {
        let (net, gates, ds) = setup(32, 3, 8, 5, 5);
        let kernel = ntk_kernel(&net, &gates, &ds, 1).unwrap().k;
        let (lo, _) = sym_eig_extremes(&kernel).unwrap();
        let trace: f64 = (0..8).map(|i| kernel[(i, i)]).sum();
        assert!(lo >= -1e-8 * trace / 8.0, "lambda_min {lo}");

        let layers = ntk_layer_kernels(&net, &gates, &ds, 1).unwrap();
        let mut sum = Matrix::zeros(8, 8);
        for lk in &layers {
            let (lo_k, _) = sym_eig_extremes(lk).unwrap();
            let tr: f64 = (0..8).map(|i| lk[(i, i)]).sum();
            assert!(lo_k >= -1e-8 * tr / 8.0);
            sum.axpy(1.0, lk);
        }
        assert!(sum.max_abs_diff(&kernel) <= 1e-10 * kernel.max_abs());
    }

    #[test]
    fn ratio_zero_perturbation_and_sign_flip() {
        let (net, _, ds) = setup(24, 3, 2, 4, 6);
        let zero = vec![Matrix::zeros(24, 24); 3];
        let r = ntk_ratio(&net, &zero, ds.x.row(0), 1, 1e-3).unwrap();
        assert_eq!(r, 0.0);

        // small perturbations: the deviation is dominated by its linear term,
        // so flipping the sign of W' barely moves the ratio
        let xi = 1e-4;
        let pert = random_spectral_perturbations(&net.shape, xi, 7);
        let r_plus = ntk_ratio(&net, &pert, ds.x.row(0), 1, xi).unwrap();
        let flipped: Vec<Matrix> = pert
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.scale(-1.0);
                q
            })
            .collect();
        let r_minus = ntk_ratio(&net, &flipped, ds.x.row(0), 1, xi).unwrap();
        assert!(r_plus > 0.0);
        assert!((r_plus - r_minus).abs() / r_plus < 1e-2, "{r_plus} vs {r_minus}");
    }

    #[test]
    fn ratio_rejects_oversized_perturbations() {
        let (net, _, ds) = setup(12, 2, 2, 4, 8);
        let pert = random_spectral_perturbations(&net.shape, 1.0, 9);
        match ntk_ratio(&net, &pert, ds.x.row(0), 1, 0.5) {
            Err(NtkError::PerturbationBoundViolated { .. }) => {}
            other => panic!("expected bound violation, got {other:?}"),
        }
    }

    #[test]
    fn drift_zero_for_identical_nets_and_scaling_oracle() {
        let (net, gates, ds) = setup(16, 2, 4, 4, 10);
        assert_eq!(kernel_drift(&net, &net, &gates, &ds, 1).unwrap(), 0.0);

        // Closed-form scaling at depth 2: scaling all W by c multiplies every
        // kernel entry by c^{2(L-1)} = c^2.
        let c = 1.5f64;
        let scaled = net.with_weights(
            net.w
                .iter()
                .map(|w| {
                    let mut s = w.clone();
                    s.scale(c);
                    s
                })
                .collect(),
        );
        let k1 = ntk_kernel(&net, &gates, &ds, 1).unwrap().k;
        let kc = ntk_kernel(&scaled, &gates, &ds, 1).unwrap().k;
        for i in 0..4 {
            for j in 0..4 {
                let expect = c * c * k1[(i, j)];
                assert!((kc[(i, j)] - expect).abs() <= 1e-10 * expect.abs().max(1e-12));
            }
        }
        let drift = kernel_drift(&net, &scaled, &gates, &ds, 1).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                oracle = oracle
                    .max((c * c - 1.0).abs() * k1[(i, j)].abs() / (k1[(i, i)] * k1[(j, j)]).sqrt());
            }
        }
        assert!((drift - oracle).abs() <= 1e-10 * oracle);

        // frozen-part mismatch is rejected
        let other = init_network(net.shape, 555);
        assert!(matches!(kernel_drift(&net, &other, &gates, &ds, 1), Err(NtkError::FrozenPartsDiffer)));
    }
}
