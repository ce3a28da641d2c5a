//! Measurement probes comparing the trained network against its analytic
//! bounds: Gram-spectrum concentration, cross-example coupling, gate overlap,
//! intermediate-transform norms, the exact one-step update decomposition,
//! per-step descent rate, gradient-norm bound, and the initial-loss bound.
//!
//! All probes are read-only; they borrow the network and gates immutably and
//! report `(measured, bound, pass)` records. High-probability statements are
//! checked as seed quotas by the callers, never as per-instance certainties.

use crate::data::Dataset;
use crate::linalg::{spectral_norm, sym_eig_extremes};
use crate::matrix::{dot, Matrix};
use crate::model::{
    compute_gates, effective_matrix, forward, intermediate_z, subnetwork_f, subnetwork_g,
    z_spectral_norm, GReluNetwork, GatePattern, ModelError,
};
use crate::train::{all_layer_gradients, hidden_features, TrainLog};
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TheoryError {
    Model(ModelError),
    ThetaOutOfRange(f64),
    /// Enumeration or probe cost grows too fast beyond this depth.
    DepthCostGuard { depth: usize, max: usize },
    RateFactorNotContractive { rate: f64 },
    TooFewLogRows(usize),
    GateCountMismatch { gates: usize, examples: usize },
}

impl fmt::Display for TheoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TheoryError::Model(e) => write!(f, "{e}"),
            TheoryError::ThetaOutOfRange(t) => write!(f, "theta must lie in (0, 1/2), got {t}"),
            TheoryError::DepthCostGuard { depth, max } => {
                write!(f, "probe refused: depth {depth} exceeds cost guard {max}")
            }
            TheoryError::RateFactorNotContractive { rate } => {
                write!(f, "rate factor eta*alpha^2*L/2 = {rate} is not < 1")
            }
            TheoryError::TooFewLogRows(n) => write!(f, "need at least 2 log rows, got {n}"),
            TheoryError::GateCountMismatch { gates, examples } => {
                write!(f, "gate pattern covers {gates} examples, dataset has {examples}")
            }
        }
    }
}

impl std::error::Error for TheoryError {}

impl From<ModelError> for TheoryError {
    fn from(e: ModelError) -> Self {
        TheoryError::Model(e)
    }
}

/// One measured quantity against its bound. The index columns are quantity
/// specific: `k` is the layer, `i`/`j` are example indices, except for
/// `z_norm` records where `k` is `k_a` and `j` is `k_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRecord {
    pub quantity: &'static str,
    pub k: Option<usize>,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TheoryReport {
    pub records: Vec<TheoryRecord>,
}

impl TheoryReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TheoryRecord> {
        self.records.iter().filter(|r| !r.pass)
    }

    pub fn extend(&mut self, other: TheoryReport) {
        self.records.extend(other.records);
    }
}

/// Concentration constants for the sub-network Gram spectra:
/// `alpha_d = m / (12 d)` below, `beta_d = 27 m / (4 d)` above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralBounds {
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub beta_x: f64,
    pub beta_y: f64,
}

impl SpectralBounds {
    pub fn for_shape(shape: &crate::model::NetworkShape) -> Self {
        let m = shape.m as f64;
        SpectralBounds {
            alpha_x: m / (12.0 * shape.d_x as f64),
            alpha_y: m / (12.0 * shape.d_y as f64),
            beta_x: 27.0 * m / (4.0 * shape.d_x as f64),
            beta_y: 27.0 * m / (4.0 * shape.d_y as f64),
        }
    }

    /// `alpha = sqrt(alpha_x alpha_y) = m / (12 sqrt(d_x d_y))`.
    pub fn alpha(&self) -> f64 {
        (self.alpha_x * self.alpha_y).sqrt()
    }

    /// `beta = sqrt(beta_x beta_y)`.
    pub fn beta(&self) -> f64 {
        (self.beta_x * self.beta_y).sqrt()
    }
}

fn check_gates(gates: &GatePattern, ds: &Dataset) -> Result<(), TheoryError> {
    if gates.examples() != ds.n() {
        return Err(TheoryError::GateCountMismatch { gates: gates.examples(), examples: ds.n() });
    }
    Ok(())
}

/// Extreme eigenvalues of `G_k^T G_k` (size `d_x`) and `F_k F_k^T` (size
/// `d_y`) for every example and layer index, against
/// `[m/threshold, 27m/4d]`-style bounds.
pub fn eig_bounds_report(net: &GReluNetwork, gates: &GatePattern) -> Result<TheoryReport, TheoryError> {
    let depth = net.shape.depth;
    let bounds = SpectralBounds::for_shape(&net.shape);
    let mut report = TheoryReport::default();
    for i in 0..gates.examples() {
        // G_0..G_L built incrementally from the input side
        let mut g = net.c.clone();
        gates.mask_rows(i, 0, &mut g);
        for k in 0..=depth {
            if k > 0 {
                g = net.w[k - 1].matmul(&g);
                gates.mask_rows(i, k, &mut g);
            }
            let gram = g.t_matmul(&g);
            let (lo, hi) = sym_eig_extremes(&gram).map_err(|_| TheoryError::Model(ModelError::NonFiniteInput))?;
            report.records.push(TheoryRecord {
                quantity: "g_gram_min",
                k: Some(k),
                i: Some(i),
                j: None,
                measured: lo,
                bound: bounds.alpha_x,
                pass: lo >= bounds.alpha_x,
            });
            report.records.push(TheoryRecord {
                quantity: "g_gram_max",
                k: Some(k),
                i: Some(i),
                j: None,
                measured: hi,
                bound: bounds.beta_x,
                pass: hi <= bounds.beta_x,
            });
        }
        // F_{L+1}..F_1 built incrementally from the output side
        let mut f = net.b.clone();
        gates.mask_cols(i, depth, &mut f);
        for k in ((1)..=(depth + 1)).rev() {
            if k <= depth {
                f = f.matmul(&net.w[k - 1]);
                gates.mask_cols(i, k - 1, &mut f);
            }
            let gram = f.matmul_t(&f);
            let (lo, hi) = sym_eig_extremes(&gram).map_err(|_| TheoryError::Model(ModelError::NonFiniteInput))?;
            report.records.push(TheoryRecord {
                quantity: "f_gram_min",
                k: Some(k),
                i: Some(i),
                j: None,
                measured: lo,
                bound: bounds.alpha_y,
                pass: lo >= bounds.alpha_y,
            });
            report.records.push(TheoryRecord {
                quantity: "f_gram_max",
                k: Some(k),
                i: Some(i),
                j: None,
                measured: hi,
                bound: bounds.beta_y,
                pass: hi <= bounds.beta_y,
            });
        }
    }
    Ok(report)
}

/// Cross-example coupling `|<G_{k-1}^j x_j, G_{k-1}^i x_i>| ||F^j_{k+1} F^{i T}_{k+1}||_2`
/// over all ordered pairs `i != j` and layers, the implied
/// `gamma_hat = max / beta^2`, and the consistency flag
/// `gamma_hat n beta^2 <= alpha^2 / 2`. Each pair record is compared against
/// `alpha^2 / (2n)`, the per-pair level at which the flag holds.
pub fn cross_term_report(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
) -> Result<(TheoryReport, f64), TheoryError> {
    check_gates(gates, ds)?;
    let n = ds.n();
    let depth = net.shape.depth;
    let bounds = SpectralBounds::for_shape(&net.shape);
    let beta_sq = bounds.beta() * bounds.beta();
    let alpha_sq = bounds.alpha() * bounds.alpha();
    let mut report = TheoryReport::default();
    if n < 2 {
        report.records.push(TheoryRecord {
            quantity: "gamma_hat",
            k: None,
            i: None,
            j: None,
            measured: 0.0,
            bound: alpha_sq / (2.0 * beta_sq * n.max(1) as f64),
            pass: true,
        });
        return Ok((report, 0.0));
    }

    let hidden = hidden_features(net, gates, ds)?; // H_k columns are G_k x_i
    // F_{k} per example for k in 2..=L+1 (the probe uses F_{k+1}, k in 1..=L)
    let mut f_all: Vec<Vec<Matrix>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut per_k = vec![Matrix::zeros(0, 0); depth + 2];
        let mut f = net.b.clone();
        gates.mask_cols(i, depth, &mut f);
        per_k[depth + 1] = f.clone();
        for k in (2..=depth).rev() {
            f = f.matmul(&net.w[k - 1]);
            gates.mask_cols(i, k - 1, &mut f);
            per_k[k] = f.clone();
        }
        f_all.push(per_k);
    }

    let pair_bound = alpha_sq / (2.0 * n as f64);
    let mut max_product = 0.0f64;
    for k in 1..=depth {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let hi = hidden[k - 1].col(i);
                let hj = hidden[k - 1].col(j);
                let inner = dot(&hi, &hj).abs();
                let ff = f_all[j][k + 1].matmul_t(&f_all[i][k + 1]);
                let product = inner * spectral_norm(&ff);
                max_product = max_product.max(product);
                report.records.push(TheoryRecord {
                    quantity: "cross_term",
                    k: Some(k),
                    i: Some(i),
                    j: Some(j),
                    measured: product,
                    bound: pair_bound,
                    pass: product <= pair_bound,
                });
            }
        }
    }
    let gamma_hat = max_product / beta_sq;
    report.records.push(TheoryRecord {
        quantity: "gamma_hat",
        k: None,
        i: None,
        j: None,
        measured: gamma_hat * n as f64 * beta_sq,
        bound: alpha_sq / 2.0,
        pass: gamma_hat * n as f64 * beta_sq <= alpha_sq / 2.0,
    });
    Ok((report, gamma_hat))
}

/// Per-layer fraction of gates open for both inputs, measured on the actual
/// propagated masks. Layer 0 gates directly on the Gaussian map of the raw
/// input, which is the literal setting of the overlap bound; deeper layers
/// gate on the propagated chain and are reported for reference.
pub fn gate_overlap(net: &GReluNetwork, x_i: &[f64], x_j: &[f64]) -> Result<Vec<f64>, TheoryError> {
    let gi = compute_gates(net, x_i)?;
    let gj = compute_gates(net, x_j)?;
    Ok((0..=net.shape.depth).map(|k| gi.overlap_fraction(0, &gj, 0, k)).collect())
}

/// All-pairs spectral norms of the intermediate transforms `Z_{k_a,k_b}`
/// against `sqrt(12 L) e^{theta/2} theta^{-1/2}` at initialization or
/// `4 sqrt(L) e^{theta/2} theta^{-1/2}` for trained weights. Record columns:
/// `k` is `k_a`, `j` is `k_b`.
pub fn z_norm_report(
    net: &GReluNetwork,
    gates: &GatePattern,
    theta: f64,
    trained: bool,
) -> Result<TheoryReport, TheoryError> {
    if !(theta > 0.0 && theta < 0.5) {
        return Err(TheoryError::ThetaOutOfRange(theta));
    }
    let depth = net.shape.depth;
    if depth > 16 {
        return Err(TheoryError::DepthCostGuard { depth, max: 16 });
    }
    let l = depth as f64;
    let scale = (theta / 2.0).exp() / theta.sqrt();
    let bound = if trained { 4.0 * l.sqrt() * scale } else { (12.0 * l).sqrt() * scale };
    let mut report = TheoryReport::default();
    for i in 0..gates.examples() {
        for k_a in 1..=depth {
            for k_b in 1..=k_a {
                let norm = z_spectral_norm(net, gates, i, k_a, k_b)?;
                report.records.push(TheoryRecord {
                    quantity: "z_norm",
                    k: Some(k_a),
                    i: Some(i),
                    j: Some(k_b),
                    measured: norm,
                    bound,
                    pass: norm <= bound,
                });
            }
        }
    }
    Ok(report)
}

/// Exact decomposition of one GD step,
/// `W^i_{t+1} - W^i_t = -eta zeta - eta Gamma + eta^2 Delta`, verified per
/// example in relative Frobenius norm. The higher-order term enumerates all
/// strictly decreasing layer subsets, so depth is capped at 6.
pub fn decomposition_check(
    net_t: &GReluNetwork,
    net_t1: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    eta: f64,
) -> Result<f64, TheoryError> {
    check_gates(gates, ds)?;
    let depth = net_t.shape.depth;
    if depth > 6 {
        return Err(TheoryError::DepthCostGuard { depth, max: 6 });
    }
    let n = ds.n();
    let (_, grads) = all_layer_gradients(net_t, gates, ds)?;

    // Per-example caches at W_t.
    let mut fs: Vec<Vec<Matrix>> = Vec::with_capacity(n); // fs[i][k] = F_k, k in 1..=L+1
    let mut gs: Vec<Vec<Matrix>> = Vec::with_capacity(n); // gs[i][k] = G_k, k in 0..=L
    let mut hs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut rs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let f: Vec<Matrix> = (1..=depth + 1)
            .map(|k| subnetwork_f(net_t, gates, i, k))
            .collect::<Result<_, _>>()?;
        let g: Vec<Matrix> =
            (0..=depth).map(|k| subnetwork_g(net_t, gates, i, k)).collect::<Result<_, _>>()?;
        let pass = forward(net_t, gates, i, ds.x.row(i))?;
        let r: Vec<f64> = pass.output.iter().zip(ds.y.row(i)).map(|(o, y)| o - y).collect();
        fs.push(f);
        gs.push(g);
        hs.push(pass.hidden);
        rs.push(r);
    }
    let f_of = |i: usize, k: usize| &fs[i][k - 1];
    let g_of = |i: usize, k: usize| &gs[i][k];

    let mut max_residual = 0.0f64;
    for i in 0..n {
        let lhs = effective_matrix(net_t1, gates, i).sub(&effective_matrix(net_t, gates, i));

        let d_y = net_t.shape.d_y;
        let d_x = net_t.shape.d_x;
        let mut zeta = Matrix::zeros(d_y, d_x);
        let mut gamma = Matrix::zeros(d_y, d_x);
        for k in 1..=depth {
            let a = f_of(i, k + 1).matvec(&f_of(i, k + 1).t_matvec(&rs[i]));
            let row = g_of(i, k - 1).t_matvec(&hs[i][k - 1]);
            zeta.rank_one_update(1.0, &a, &row);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let a = f_of(i, k + 1).matvec(&f_of(j, k + 1).t_matvec(&rs[j]));
                let row = g_of(i, k - 1).t_matvec(&hs[j][k - 1]);
                gamma.rank_one_update(1.0, &a, &row);
            }
        }

        // Delta: sum over s >= 2 and L >= k_1 > ... > k_s >= 1 of
        // (-eta)^{s-2} F_{k_1+1} grad_{k_1} Z_{k_1-1,k_2} ... grad_{k_s} G_{k_s-1}
        let mut delta = Matrix::zeros(d_y, d_x);
        for subset in 1u32..(1 << depth) {
            let s = subset.count_ones() as usize;
            if s < 2 {
                continue;
            }
            let ks: Vec<usize> =
                (1..=depth).rev().filter(|k| subset >> (k - 1) & 1 == 1).collect();
            let mut m = f_of(i, ks[0] + 1).matmul(&grads[ks[0] - 1]);
            for w in ks.windows(2) {
                let (ka, kb) = (w[0], w[1]);
                let z = intermediate_z(net_t, gates, i, ka - 1, kb)?;
                m = m.matmul(&z).matmul(&grads[kb - 1]);
            }
            let term = m.matmul(g_of(i, ks[s - 1] - 1));
            delta.axpy((-eta).powi(s as i32 - 2), &term);
        }

        let mut rhs = Matrix::zeros(d_y, d_x);
        rhs.axpy(-eta, &zeta);
        rhs.axpy(-eta, &gamma);
        rhs.axpy(eta * eta, &delta);

        let lhs_norm = lhs.frobenius_norm();
        let residual = if lhs_norm > 1e-300 {
            lhs.sub(&rhs).frobenius_norm() / lhs_norm
        } else {
            rhs.frobenius_norm()
        };
        max_residual = max_residual.max(residual);
    }
    Ok(max_residual)
}

/// Fraction of consecutive logged steps satisfying the contraction
/// `loss_{t+g} <= (1 - eta alpha^2 L / 2)^g loss_t + 1e-12`.
///
/// The slack is absolute: once the loss sits below it the run has reached
/// the epsilon-error regime the rate statement is about, and the inequality
/// holds vacuously there.
pub fn descent_rate_check(
    log: &TrainLog,
    alpha: f64,
    depth: usize,
    eta: f64,
) -> Result<f64, TheoryError> {
    if log.rows.len() < 2 {
        return Err(TheoryError::TooFewLogRows(log.rows.len()));
    }
    let rate = eta * alpha * alpha * depth as f64 / 2.0;
    if !(rate < 1.0) {
        return Err(TheoryError::RateFactorNotContractive { rate });
    }
    let mut satisfied = 0usize;
    let mut total = 0usize;
    for w in log.rows.windows(2) {
        let gap = (w[1].iter - w[0].iter) as i32;
        let factor = (1.0 - rate).powi(gap);
        total += 1;
        if w[1].loss <= factor * w[0].loss + 1e-12 {
            satisfied += 1;
        }
    }
    Ok(satisfied as f64 / total as f64)
}

/// Per-layer gradient spectral norms against
/// `||grad_k||_2^2 <= (beta^2 + n gamma beta^2) loss`.
pub fn grad_norm_bound_check(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
    beta: f64,
    gamma: f64,
) -> Result<TheoryReport, TheoryError> {
    check_gates(gates, ds)?;
    let (loss, grads) = all_layer_gradients(net, gates, ds)?;
    let bound = (beta * beta + ds.n() as f64 * gamma * beta * beta) * loss;
    let mut report = TheoryReport::default();
    for (k0, g) in grads.iter().enumerate() {
        let s = spectral_norm(g);
        report.records.push(TheoryRecord {
            quantity: "grad_norm_sq",
            k: Some(k0 + 1),
            i: None,
            j: None,
            measured: s * s,
            bound,
            pass: s * s <= bound,
        });
    }
    Ok(report)
}

/// Initial loss against `4 m n / d_x`, plus the label-scaling premise
/// `max |y| <= m / d_x`.
pub fn initial_loss_check(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
) -> Result<TheoryReport, TheoryError> {
    check_gates(gates, ds)?;
    let l0 = crate::train::loss(net, gates, ds)?;
    let shape = &net.shape;
    let bound = 4.0 * shape.m as f64 * ds.n() as f64 / shape.d_x as f64;
    let label_bound = shape.m as f64 / shape.d_x as f64;
    let max_label = ds.y.max_abs();
    Ok(TheoryReport {
        records: vec![
            TheoryRecord {
                quantity: "initial_loss",
                k: None,
                i: None,
                j: None,
                measured: l0,
                bound,
                pass: l0 <= bound,
            },
            TheoryRecord {
                quantity: "label_bound",
                k: None,
                i: None,
                j: None,
                measured: max_label,
                bound: label_bound,
                pass: max_label <= label_bound,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_ackley;
    use crate::model::{compute_gates_all, init_network, NetworkShape};
    

    fn setup(m: usize, depth: usize, n: usize, d: usize, seed: u64) -> (GReluNetwork, GatePattern, Dataset) {
        let ds = gen_ackley(n, d, seed).unwrap();
        let net = init_network(NetworkShape::new(d, 1, m, depth), seed + 1);
        let gates = compute_gates_all(&net, &ds.x).unwrap();
        (net, gates, ds)
    }

    #[test]
    fn bound_constants_evaluate() {
        let b = SpectralBounds::for_shape(&NetworkShape::new(10, 1, 1200, 2));
        assert!((b.alpha_x - 10.0).abs() < 1e-12);
        assert!((b.beta_x - 810.0).abs() < 1e-12);
        let b2 = SpectralBounds::for_shape(&NetworkShape::new(8, 1, 768, 3));
        assert!((b2.alpha() - 768.0 / (12.0 * 8.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn scalar_f_gram_has_equal_extremes() {
        let (net, gates, _) = setup(32, 2, 2, 5, 1);
        let report = eig_bounds_report(&net, &gates).unwrap();
        for rec in report.records.iter().filter(|r| r.quantity.starts_with("f_gram")) {
            // d_y = 1: F F^T is the scalar ||F||^2, so min == max per (k, i)
            let partner = report
                .records
                .iter()
                .find(|r| {
                    r.k == rec.k
                        && r.i == rec.i
                        && r.quantity != rec.quantity
                        && r.quantity.starts_with("f_gram")
                })
                .unwrap();
            assert!((rec.measured - partner.measured).abs() <= 1e-8 * rec.measured.abs().max(1e-12));
        }
    }

    #[test]
    fn probes_leave_inputs_unchanged() {
        let (net, gates, ds) = setup(24, 3, 4, 6, 2);
        let net_before = net.clone();
        let gates_before = gates.clone();
        let _ = eig_bounds_report(&net, &gates).unwrap();
        let _ = cross_term_report(&net, &gates, &ds).unwrap();
        let _ = z_norm_report(&net, &gates, 1.0 / 3.0, false).unwrap();
        let _ = initial_loss_check(&net, &gates, &ds).unwrap();
        assert_eq!(net, net_before);
        assert_eq!(gates, gates_before);
    }

    #[test]
    fn cross_term_empty_for_single_example() {
        let (net, gates, ds) = setup(16, 2, 1, 4, 3);
        let (report, gamma_hat) = cross_term_report(&net, &gates, &ds).unwrap();
        assert_eq!(gamma_hat, 0.0);
        assert_eq!(report.records.len(), 1);
        assert!(report.all_pass());
    }

    #[test]
    fn cross_term_duplicate_row_is_maximal_self_correlation() {
        // x_j = x_i duplicates the example: the (i,j) product equals
        // ||G x||^2 ||F F^T||_2, the self-correlation value.
        let (net, _, _) = setup(16, 2, 2, 4, 4);
        let mut x = Matrix::zeros(2, 4);
        x[(0, 0)] = 1.0;
        x[(1, 0)] = 1.0;
        let ds = Dataset::from_parts(x, Matrix::zeros(2, 1), 1.0).unwrap();
        let gates = compute_gates_all(&net, &ds.x).unwrap();
        let (report, _) = cross_term_report(&net, &gates, &ds).unwrap();
        let hidden = hidden_features(&net, &gates, &ds).unwrap();
        for k in 1..=2usize {
            let h = hidden[k - 1].col(0);
            let f = subnetwork_f(&net, &gates, 0, k + 1).unwrap();
            let self_val = dot(&h, &h) * spectral_norm(&f.matmul_t(&f));
            let rec = report
                .records
                .iter()
                .find(|r| r.quantity == "cross_term" && r.k == Some(k) && r.i == Some(0))
                .unwrap();
            assert!((rec.measured - self_val).abs() <= 1e-9 * self_val.max(1e-12));
        }
    }

    #[test]
    fn overlap_identical_and_opposite_inputs() {
        let net = init_network(NetworkShape::new(6, 1, 2048, 2), 5);
        let mut x = vec![0.0; 6];
        x[2] = 1.0;
        let same = gate_overlap(&net, &x, &x).unwrap();
        let gates = compute_gates(&net, &x).unwrap();
        for (k, o) in same.iter().enumerate() {
            assert!((o - gates.open_fraction(0, k)).abs() < 1e-15);
            assert!((o - 0.5).abs() < 0.05, "layer {k} open fraction {o}");
        }
        // Opposite input: layer 0 gates on C x directly, so masks are disjoint.
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let opp = gate_overlap(&net, &x, &neg).unwrap();
        assert_eq!(opp[0], 0.0);
    }

    #[test]
    fn z_norm_report_small_net() {
        let (net, gates, _) = setup(24, 1, 1, 4, 6);
        let report = z_norm_report(&net, &gates, 1.0 / 3.0, false).unwrap();
        // L = 1: the single pair is Z_{1,1} = D_1 with norm <= 1 <= bound
        assert_eq!(report.records.len(), 1);
        assert!(report.records[0].measured <= 1.0);
        assert!(report.all_pass());
        assert!(matches!(
            z_norm_report(&net, &gates, 0.6, false),
            Err(TheoryError::ThetaOutOfRange(_))
        ));
    }

    fn gd_step(net: &GReluNetwork, gates: &GatePattern, ds: &Dataset, eta: f64) -> GReluNetwork {
        let (_, grads) = all_layer_gradients(net, gates, ds).unwrap();
        let mut w = net.w.clone();
        for (wk, g) in w.iter_mut().zip(&grads) {
            wk.axpy(-eta, g);
        }
        net.with_weights(w)
    }

    #[test]
    fn decomposition_zero_eta_and_single_example() {
        let (net, gates, ds) = setup(8, 3, 1, 3, 7);
        let r = decomposition_check(&net, &net, &gates, &ds, 0.0).unwrap();
        assert_eq!(r, 0.0);
        // n = 1: the cross term vanishes, identity must still hold exactly
        let stepped = gd_step(&net, &gates, &ds, 1e-2);
        let r = decomposition_check(&net, &stepped, &gates, &ds, 1e-2).unwrap();
        assert!(r < 1e-10, "residual {r}");
    }

    #[test]
    fn decomposition_exact_across_etas_and_depths() {
        // The identity is a polynomial statement in eta, so it holds at
        // fp-epsilon scale even for steps far past the stable regime.
        for depth in [1usize, 2, 3] {
            let (net, gates, ds) = setup(8, depth, 3, 3, 20 + depth as u64);
            for eta in [1e-4, 1e-2, 1.0] {
                let stepped = gd_step(&net, &gates, &ds, eta);
                let r = decomposition_check(&net, &stepped, &gates, &ds, eta).unwrap();
                assert!(r < 1e-10, "depth {depth} eta {eta}: residual {r}");
            }
        }
    }

    #[test]
    fn decomposition_refuses_deep_nets() {
        let (net, gates, ds) = setup(4, 7, 1, 3, 8);
        assert!(matches!(
            decomposition_check(&net, &net, &gates, &ds, 1e-2),
            Err(TheoryError::DepthCostGuard { .. })
        ));
    }

    #[test]
    fn descent_rate_fraction_cases() {
        use crate::train::{TrainLogRow, TrainOutcome};
        let row = |iter: usize, loss: f64| TrainLogRow {
            iter,
            loss,
            grad_norm: 0.0,
            grad_tdiff: 0.0,
            tau: 0.0,
            eta: 0.1,
            wall_ms: 0,
            hamming: None,
        };
        // constant positive loss -> fraction 0
        let log = TrainLog {
            rows: vec![row(0, 1.0), row(1, 1.0), row(2, 1.0)],
            eta: 0.1,
            outcome: TrainOutcome::IterationLimit,
        };
        // rate factor = eta alpha^2 L / 2 = 0.5 with alpha^2 = 10, L = 1
        let f = descent_rate_check(&log, 10f64.sqrt(), 1, 0.1).unwrap();
        assert_eq!(f, 0.0);
        // halving each step exactly meets factor 1/2
        let log = TrainLog {
            rows: vec![row(0, 1.0), row(1, 0.5), row(2, 0.25)],
            eta: 0.1,
            outcome: TrainOutcome::IterationLimit,
        };
        let f = descent_rate_check(&log, 10f64.sqrt(), 1, 0.1).unwrap();
        assert_eq!(f, 1.0);
        // rate factor >= 1 is a contract error
        assert!(matches!(
            descent_rate_check(&log, 10.0, 1, 0.3),
            Err(TheoryError::RateFactorNotContractive { .. })
        ));
        let short = TrainLog { rows: vec![row(0, 1.0)], eta: 0.1, outcome: TrainOutcome::IterationLimit };
        assert!(matches!(descent_rate_check(&short, 1.0, 1, 0.1), Err(TheoryError::TooFewLogRows(1))));
    }

    #[test]
    fn grad_norm_bound_zero_residual_and_formula_reduction() {
        let (net, gates, mut ds) = setup(12, 2, 1, 4, 9);
        let hidden = hidden_features(&net, &gates, &ds).unwrap();
        let out = net.b.matmul(hidden.last().unwrap());
        ds.y[(0, 0)] = out[(0, 0)];
        // zero residuals: both sides zero, passes trivially
        let report = grad_norm_bound_check(&net, &gates, &ds, 10.0, 0.0).unwrap();
        assert!(report.all_pass());
        for r in &report.records {
            assert_eq!(r.measured, 0.0);
            assert_eq!(r.bound, 0.0);
        }
        // n = 1, gamma = 0: bound reduces to beta^2 * loss
        ds.y[(0, 0)] += 1.0;
        let l = crate::train::loss(&net, &gates, &ds).unwrap();
        let report = grad_norm_bound_check(&net, &gates, &ds, 3.0, 0.0).unwrap();
        for r in &report.records {
            assert!((r.bound - 9.0 * l).abs() < 1e-12 * r.bound.max(1.0));
        }
    }

    #[test]
    fn initial_loss_formula_and_degenerate_case() {
        let (net, gates, ds) = setup(768, 3, 16, 8, 10);
        let report = initial_loss_check(&net, &gates, &ds).unwrap();
        let rec = &report.records[0];
        assert_eq!(rec.bound, 6144.0);
        // zero labels, zero-ish input handled upstream; here just check the
        // bound wiring and that the probe reports the measured loss
        let l0 = crate::train::loss(&net, &gates, &ds).unwrap();
        assert_eq!(rec.measured, l0);
    }
}
