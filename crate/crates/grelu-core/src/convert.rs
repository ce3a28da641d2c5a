//! Gated-to-ReLU equivalence transform.
//!
//! Layer by layer, the converted net's weight is the minimal-norm solution of
//! the matching condition `W~_k * relu(prev layer values) = H_k` over the
//! training set, where `H_k` is the gated net's post-gate hidden map. Solving
//! the systems in order makes every converted layer value coincide with the
//! gated hidden value on the training set, so the readout `B z_L` reproduces
//! the gated output and the training losses agree. Requires `m >= n`.
//!
//! Off the training set no equivalence is claimed. The least-squares system
//! is underdetermined for `m > n`; the minimal-norm solution is taken as the
//! canonical representative.

use crate::data::Dataset;
use crate::linalg::min_norm_least_squares;
use crate::matrix::Matrix;
use crate::model::{GReluNetwork, GatePattern, ModelError, ReluNetwork};
use crate::train::hidden_features;
use core::fmt;

/// A layer solve is rejected when its relative residual exceeds this; that
/// signals rank deficiency of the feature matrix.
pub const LAYER_RESIDUAL_LIMIT: f64 = 1e-6;

/// A gated hidden value this far below zero at an open converted-net mask
/// position counts as a structural failure of the sign pairing.
pub const SIGN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum ConvertError {
    Model(ModelError),
    /// The construction needs `m >= n`.
    NotOverparameterized { m: usize, n: usize },
    /// `||W~_k A_k - T_k||_F > 1e-6 ||T_k||_F` at some layer.
    ResidualTooLarge { layer: usize, relative_residual: f64 },
}

impl fmt::Display for ConvertError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvertError::Model(e) => write!(f, "{e}"),
            ConvertError::NotOverparameterized { m, n } => {
                write!(f, "conversion requires width m >= n examples, got m={m}, n={n}")
            }
            ConvertError::ResidualTooLarge { layer, relative_residual } => write!(
                f,
                "conversion failed at layer {layer}: relative residual {relative_residual:e} (rank deficiency)"
            ),
        }
    }
}

impl std::error::Error for ConvertError {}

impl From<ModelError> for ConvertError {
    fn from(e: ModelError) -> Self {
        ConvertError::Model(e)
    }
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

/// Construct the ReLU network with the same training-set footprint.
///
/// Deterministic given `(net, gates, ds)`: the only nontrivial step is the
/// minimal-norm least-squares solve per layer.
pub fn grelu_to_relu(
    net: &GReluNetwork,
    gates: &GatePattern,
    ds: &Dataset,
) -> Result<ReluNetwork, ConvertError> {
    let (m, n) = (net.shape.m, ds.n());
    if m < n {
        return Err(ConvertError::NotOverparameterized { m, n });
    }
    let targets = hidden_features(net, gates, ds)?; // H_0..H_L, m x n
    let mut w = Vec::with_capacity(net.shape.depth);
    // A_1 = relu(z_0) with z_0 = C X^T from the converted net's own recursion.
    let mut features = relu_of(&net.c.matmul_t(&ds.x));
    for k in 1..=net.shape.depth {
        let t = &targets[k];
        // Solve W~ A = T in minimal Frobenius norm via the transposed system
        // A^T W~^T = T^T.
        let wt = min_norm_least_squares(&features.transpose(), &t.transpose())
            .expect("dimensions agree by construction")
            .transpose();
        let z = wt.matmul(&features);
        let scale = t.frobenius_norm();
        let residual = z.sub(t).frobenius_norm();
        let relative = if scale > 0.0 { residual / scale } else { residual };
        if relative > LAYER_RESIDUAL_LIMIT {
            return Err(ConvertError::ResidualTooLarge { layer: k, relative_residual: relative });
        }
        features = relu_of(&z);
        w.push(wt);
    }
    Ok(ReluNetwork::from_parts(net.shape, net.c.clone(), net.b.clone(), w))
}

/// Footprint comparison between a gated network and a ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Max-abs deviation per layer `0..=L`: layer 0 compares the ReLU-net
    /// post-activation `relu(C x)` with the gated `h_0`; deeper layers
    /// compare the converted layer value `z_k` with the gated `h_k`.
    pub per_layer_max_dev: Vec<f64>,
    /// Max-abs deviation of the readouts over the training set.
    pub output_max_dev: f64,
    pub loss_grelu: f64,
    pub loss_relu: f64,
    /// Positions where a gated hidden value is materially negative while the
    /// ReLU net's own mask is open — impossible under a faithful pairing.
    pub sign_violations: usize,
}

impl EquivalenceReport {
    pub fn max_layer_dev(&self) -> f64 {
        self.per_layer_max_dev.iter().cloned().fold(0.0, f64::max)
    }

    /// Relative disagreement of the two training losses.
    pub fn loss_gap(&self) -> f64 {
        let denom = self.loss_grelu.abs().max(self.loss_relu.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.loss_grelu - self.loss_relu).abs() / denom
        }
    }
}

/// Compare intermediate and output values of the two networks over the
/// training set; both losses are reported.
pub fn verify_equivalence(
    net: &GReluNetwork,
    gates: &GatePattern,
    relu: &ReluNetwork,
    ds: &Dataset,
) -> Result<EquivalenceReport, ConvertError> {
    if net.shape != relu.shape {
        return Err(ConvertError::Model(ModelError::DimensionMismatch {
            expected: net.shape.m,
            got: relu.shape.m,
        }));
    }
    let depth = net.shape.depth;
    let hidden = hidden_features(net, gates, ds)?;
    let yt = ds.y.transpose();

    // Batched ReLU forward: z_0 = C X^T, z_{k+1} = W~_{k+1} relu(z_k).
    let mut z = relu.c.matmul_t(&ds.x);
    let mut per_layer = Vec::with_capacity(depth + 1);
    per_layer.push(relu_of(&z).max_abs_diff(&hidden[0]));
    let mut sign_violations = 0usize;
    for k in 1..=depth {
        z = relu.w[k - 1].matmul(&relu_of(&z));
        per_layer.push(z.max_abs_diff(&hidden[k]));
        for (zv, hv) in z.data().iter().zip(hidden[k].data()) {
            if *hv < -SIGN_TOLERANCE && *zv > 0.0 {
                sign_violations += 1;
            }
        }
    }
    let out_relu = relu.b.matmul(&z);
    let out_grelu = net.b.matmul(&hidden[depth]);
    let output_max_dev = out_relu.max_abs_diff(&out_grelu);

    let r_relu = out_relu.sub(&yt);
    let r_grelu = out_grelu.sub(&yt);
    Ok(EquivalenceReport {
        per_layer_max_dev: per_layer,
        output_max_dev,
        loss_grelu: 0.5 * r_grelu.frobenius_dot(&r_grelu),
        loss_relu: 0.5 * r_relu.frobenius_dot(&r_relu),
        sign_violations,
    })
}
