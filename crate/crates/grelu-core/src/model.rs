//! The gated network, its frozen gate patterns, and the baseline ReLU net.
//!
//! A gated network carries frozen matrices `C` (input), `B` (output) and
//! `Psi_1..Psi_L` (gate chain) plus trained layers `W_1..W_L`. For an input
//! `x` the gate chain produces per-layer 0/1 masks `D_0..D_L` once; after
//! that the network applied to `x` is the plain masked product
//! `B D_L W_L ... D_1 W_1 D_0 C`, and negative values pass through open
//! gates unclamped. Masks depend only on `(C, Psi, x)`, never on `W`.
//!
//! Layer indexing follows the factor order: `w[k]` and `psi[k]` in code are
//! the 1-based `W_{k+1}`, `Psi_{k+1}`; gate layer `k` in `0..=L` is `D_k`.

use crate::linalg::{gaussian_matrix, spectral_norm_block};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use core::fmt;

/// RNG stream ids for the frozen and trained parameter blocks. Layer `k`
/// always draws from its own stream, independent of materialization order.
const STREAM_C: u64 = 0;
const STREAM_B: u64 = 1;
const STREAM_PSI_BASE: u64 = 0x100;
const STREAM_W_BASE: u64 = 0x200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub d_x: usize,
    pub d_y: usize,
    pub m: usize,
    /// Number of hidden (trained) layers.
    pub depth: usize,
}

impl NetworkShape {
    pub fn new(d_x: usize, d_y: usize, m: usize, depth: usize) -> Self {
        assert!(d_x >= 1 && d_y >= 1 && m >= 1 && depth >= 1, "all shape fields must be >= 1");
        NetworkShape { d_x, d_y, m, depth }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    NonFiniteInput,
    DimensionMismatch { expected: usize, got: usize },
    LayerIndexOutOfRange { index: usize, min: usize, max: usize },
    IndexOrderViolation { k_a: usize, k_b: usize },
    GateCountMismatch { gates: usize, examples: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::NonFiniteInput => write!(f, "input contains non-finite entries"),
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ModelError::LayerIndexOutOfRange { index, min, max } => {
                write!(f, "layer index {index} outside {min}..={max}")
            }
            ModelError::IndexOrderViolation { k_a, k_b } => {
                write!(f, "need 1 <= k_b <= k_a <= L, got k_a={k_a}, k_b={k_b}")
            }
            ModelError::GateCountMismatch { gates, examples } => {
                write!(f, "gate pattern covers {gates} examples, dataset has {examples}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Frozen `(C, B, Psi)` plus trained `W`; see module docs for conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct GReluNetwork {
    pub shape: NetworkShape,
    pub c: Matrix,
    pub b: Matrix,
    pub psi: Vec<Matrix>,
    pub w: Vec<Matrix>,
}

/// Conventional ReLU network sharing the frozen `C` and `B`.
///
/// Forward recursion: `z_0 = C x`, `z_k = W~_k relu(z_{k-1})`, read out as
/// `y = B z_L`. Masks are recomputed from the net's own pre-activations at
/// every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    pub shape: NetworkShape,
    pub c: Matrix,
    pub b: Matrix,
    pub w: Vec<Matrix>,
}

/// Per-example bit masks `D_0..D_L`, bit-packed one bit per neuron.
///
/// Fixed once computed; bit `s` of layer `k` is 1 iff the gate-chain
/// pre-activation is strictly positive (ties at zero are closed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatePattern {
    n: usize,
    layers: usize,
    m: usize,
    words_per_mask: usize,
    bits: Vec<u64>,
}

impl GatePattern {
    fn new_closed(n: usize, layers: usize, m: usize) -> Self {
        let words_per_mask = m.div_ceil(64);
        GatePattern { n, layers, m, words_per_mask, bits: vec![0; n * layers * words_per_mask] }
    }

    pub fn examples(&self) -> usize {
        self.n
    }

    /// Number of mask layers, `L + 1`.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn width(&self) -> usize {
        self.m
    }

    #[inline]
    fn base(&self, example: usize, layer: usize) -> usize {
        debug_assert!(example < self.n && layer < self.layers);
        (example * self.layers + layer) * self.words_per_mask
    }

    pub fn mask_words(&self, example: usize, layer: usize) -> &[u64] {
        let b = self.base(example, layer);
        &self.bits[b..b + self.words_per_mask]
    }

    #[inline]
    pub fn is_open(&self, example: usize, layer: usize, neuron: usize) -> bool {
        debug_assert!(neuron < self.m);
        let b = self.base(example, layer);
        self.bits[b + neuron / 64] >> (neuron % 64) & 1 == 1
    }

    fn set_open(&mut self, example: usize, layer: usize, neuron: usize) {
        let b = self.base(example, layer);
        self.bits[b + neuron / 64] |= 1 << (neuron % 64);
    }

    pub fn open_count(&self, example: usize, layer: usize) -> usize {
        self.mask_words(example, layer).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn open_fraction(&self, example: usize, layer: usize) -> f64 {
        self.open_count(example, layer) as f64 / self.m as f64
    }

    /// Zero the entries of `v` whose gates are closed.
    pub fn mask_vec(&self, example: usize, layer: usize, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.m);
        let words = self.mask_words(example, layer);
        for (s, x) in v.iter_mut().enumerate() {
            if words[s / 64] >> (s % 64) & 1 == 0 {
                *x = 0.0;
            }
        }
    }

    /// Zero the rows of `a` whose gates are closed.
    pub fn mask_rows(&self, example: usize, layer: usize, a: &mut Matrix) {
        debug_assert_eq!(a.rows(), self.m);
        for s in 0..self.m {
            if !self.is_open(example, layer, s) {
                a.row_mut(s).fill(0.0);
            }
        }
    }

    /// Zero the columns of `a` whose gates are closed.
    pub fn mask_cols(&self, example: usize, layer: usize, a: &mut Matrix) {
        debug_assert_eq!(a.cols(), self.m);
        for i in 0..a.rows() {
            let row = a.row_mut(i);
            self.mask_vec(example, layer, row);
        }
    }

    /// Dense 0/1 matrix of one mask layer over all examples, `m x n`,
    /// for fused batched products.
    pub fn mask_matrix(&self, layer: usize) -> Matrix {
        let mut out = Matrix::zeros(self.m, self.n);
        for i in 0..self.n {
            for s in 0..self.m {
                if self.is_open(i, layer, s) {
                    out[(s, i)] = 1.0;
                }
            }
        }
        out
    }

    /// Fraction of neurons open in both patterns at a layer.
    pub fn overlap_fraction(&self, i: usize, other: &GatePattern, j: usize, layer: usize) -> f64 {
        assert_eq!(self.m, other.m);
        let a = self.mask_words(i, layer);
        let b = other.mask_words(j, layer);
        let both: usize = a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as usize).sum();
        both as f64 / self.m as f64
    }

    /// Serialize as per-mask byte blocks (LSB-first bits, each mask padded to
    /// a byte boundary), example-major then layer.
    pub fn pack_bytes(&self) -> Vec<u8> {
        let bytes_per_mask = self.m.div_ceil(8);
        let mut out = Vec::with_capacity(self.n * self.layers * bytes_per_mask);
        for i in 0..self.n {
            for k in 0..self.layers {
                let words = self.mask_words(i, k);
                for byte_idx in 0..bytes_per_mask {
                    let word = words[byte_idx / 8];
                    out.push((word >> (8 * (byte_idx % 8)) & 0xFF) as u8);
                }
            }
        }
        out
    }

    /// Inverse of [`GatePattern::pack_bytes`]; `None` if the byte count does
    /// not match the dimensions or a padding bit is set.
    pub fn unpack_bytes(n: usize, layers: usize, m: usize, bytes: &[u8]) -> Option<GatePattern> {
        let bytes_per_mask = m.div_ceil(8);
        if bytes.len() != n * layers * bytes_per_mask || n == 0 || layers == 0 || m == 0 {
            return None;
        }
        let mut pattern = GatePattern::new_closed(n, layers, m);
        let mut cursor = 0;
        for i in 0..n {
            for k in 0..layers {
                for byte_idx in 0..bytes_per_mask {
                    let byte = bytes[cursor];
                    cursor += 1;
                    for bit in 0..8 {
                        let s = byte_idx * 8 + bit;
                        if byte >> bit & 1 == 1 {
                            if s >= m {
                                return None;
                            }
                            pattern.set_open(i, k, s);
                        }
                    }
                }
            }
        }
        Some(pattern)
    }

    /// Fraction of disagreeing bits between two patterns at matching
    /// (example, layer) positions.
    pub fn hamming_fraction(&self, other: &GatePattern) -> f64 {
        assert_eq!((self.n, self.layers, self.m), (other.n, other.layers, other.m));
        let mut diff = 0usize;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            diff += (a ^ b).count_ones() as usize;
        }
        diff as f64 / (self.n * self.layers * self.m) as f64
    }
}

/// Initialization: `W, Psi ~ N(0, 2/m)`, `C ~ N(0, 2/d_x)`, `B ~ N(0, 2/d_y)`,
/// all from disjoint streams of the given seed.
pub fn init_network(shape: NetworkShape, seed: u64) -> GReluNetwork {
    let NetworkShape { d_x, d_y, m, depth } = shape;
    let c = gaussian_matrix(m, d_x, 2.0 / d_x as f64, &RngStream::new(seed, STREAM_C)).unwrap();
    let b = gaussian_matrix(d_y, m, 2.0 / d_y as f64, &RngStream::new(seed, STREAM_B)).unwrap();
    let var_w = 2.0 / m as f64;
    let psi = (0..depth)
        .map(|k| gaussian_matrix(m, m, var_w, &RngStream::new(seed, STREAM_PSI_BASE + k as u64)).unwrap())
        .collect();
    let w = (0..depth)
        .map(|k| gaussian_matrix(m, m, var_w, &RngStream::new(seed, STREAM_W_BASE + k as u64)).unwrap())
        .collect();
    GReluNetwork { shape, c, b, psi, w }
}

impl GReluNetwork {
    /// Replace the trained layers wholesale (the frozen parts never change).
    pub fn with_weights(&self, w: Vec<Matrix>) -> GReluNetwork {
        assert_eq!(w.len(), self.shape.depth);
        GReluNetwork { shape: self.shape, c: self.c.clone(), b: self.b.clone(), psi: self.psi.clone(), w }
    }
}

fn check_input(net_dim: usize, x: &[f64]) -> Result<(), ModelError> {
    if x.len() != net_dim {
        return Err(ModelError::DimensionMismatch { expected: net_dim, got: x.len() });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(())
}

/// Gate derivation for one example: `z_0 = [C x]^+`, `z_k = [Psi_k z_{k-1}]^+`,
/// mask bit set iff the pre-activation is strictly positive. Independent of
/// the trained layers by construction.
pub fn compute_gates(net: &GReluNetwork, x: &[f64]) -> Result<GatePattern, ModelError> {
    check_input(net.shape.d_x, x)?;
    let depth = net.shape.depth;
    let mut gates = GatePattern::new_closed(1, depth + 1, net.shape.m);
    let mut z = net.c.matvec(x);
    for layer in 0..=depth {
        for (s, v) in z.iter_mut().enumerate() {
            if *v > 0.0 {
                gates.set_open(0, layer, s);
            } else {
                *v = 0.0;
            }
        }
        if layer < depth {
            z = net.psi[layer].matvec(&z);
        }
    }
    Ok(gates)
}

/// Gates for every row of `x` (one example per row).
pub fn compute_gates_all(net: &GReluNetwork, x: &Matrix) -> Result<GatePattern, ModelError> {
    let depth = net.shape.depth;
    let mut gates = GatePattern::new_closed(x.rows(), depth + 1, net.shape.m);
    for i in 0..x.rows() {
        let single = compute_gates(net, x.row(i))?;
        for layer in 0..=depth {
            let b_dst = gates.base(i, layer);
            let b_src = single.base(0, layer);
            let w = gates.words_per_mask;
            gates.bits[b_dst..b_dst + w].copy_from_slice(&single.bits[b_src..b_src + w]);
        }
    }
    Ok(gates)
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    /// Post-gate hidden values `h_0..h_L`.
    pub hidden: Vec<Vec<f64>>,
}

/// Masked forward pass with fixed gates: `h_0 = D_0 C x`,
/// `h_k = D_k W_k h_{k-1}`, `output = B h_L`. No clamping anywhere —
/// negative values propagate through open gates.
///
/// The caller is responsible for pairing `x` with its own gates; debug builds
/// verify the pairing.
pub fn forward(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    x: &[f64],
) -> Result<ForwardPass, ModelError> {
    check_input(net.shape.d_x, x)?;
    if gates.width() != net.shape.m || gates.layers() != net.shape.depth + 1 {
        return Err(ModelError::DimensionMismatch { expected: net.shape.m, got: gates.width() });
    }
    debug_assert!(
        {
            let fresh = compute_gates(net, x)?;
            (0..=net.shape.depth).all(|k| fresh.mask_words(0, k) == gates.mask_words(example, k))
        },
        "gates were not derived from this input"
    );
    let mut h = net.c.matvec(x);
    gates.mask_vec(example, 0, &mut h);
    let mut hidden = vec![h];
    for k in 0..net.shape.depth {
        let mut next = net.w[k].matvec(hidden.last().unwrap());
        gates.mask_vec(example, k + 1, &mut next);
        hidden.push(next);
    }
    let output = net.b.matvec(hidden.last().unwrap());
    Ok(ForwardPass { output, hidden })
}

/// The full masked product `B D_L W_L ... D_1 W_1 D_0 C` as a `d_y x d_x`
/// matrix, accumulated from the output side.
pub fn effective_matrix(net: &GReluNetwork, gates: &GatePattern, example: usize) -> Matrix {
    let depth = net.shape.depth;
    let mut t = net.b.clone();
    gates.mask_cols(example, depth, &mut t);
    for k in (1..=depth).rev() {
        t = t.matmul(&net.w[k - 1]);
        gates.mask_cols(example, k - 1, &mut t);
    }
    t.matmul(&net.c)
}

/// Suffix factor `F_k = B D_L W_L ... D_k W_k D_{k-1}` for `k` in `1..=L+1`,
/// with `F_{L+1} = B D_L`.
pub fn subnetwork_f(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    k: usize,
) -> Result<Matrix, ModelError> {
    let depth = net.shape.depth;
    if k < 1 || k > depth + 1 {
        return Err(ModelError::LayerIndexOutOfRange { index: k, min: 1, max: depth + 1 });
    }
    let mut f = net.b.clone();
    gates.mask_cols(example, depth, &mut f);
    for j in (k..=depth).rev() {
        f = f.matmul(&net.w[j - 1]);
        gates.mask_cols(example, j - 1, &mut f);
    }
    Ok(f)
}

/// Prefix factor `G_k = D_k W_k ... D_1 W_1 D_0 C` for `k` in `0..=L`, with
/// `G_0 = D_0 C`.
pub fn subnetwork_g(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    k: usize,
) -> Result<Matrix, ModelError> {
    let depth = net.shape.depth;
    if k > depth {
        return Err(ModelError::LayerIndexOutOfRange { index: k, min: 0, max: depth });
    }
    let mut g = net.c.clone();
    gates.mask_rows(example, 0, &mut g);
    for j in 1..=k {
        g = net.w[j - 1].matmul(&g);
        gates.mask_rows(example, j, &mut g);
    }
    Ok(g)
}

/// Intermediate transform `Z_{k_a,k_b} = D_{k_a} W_{k_a} ... W_{k_b+1} D_{k_b}`
/// for `1 <= k_b <= k_a <= L`; `Z_{k,k} = D_k`.
pub fn intermediate_z(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    k_a: usize,
    k_b: usize,
) -> Result<Matrix, ModelError> {
    let depth = net.shape.depth;
    if !(1 <= k_b && k_b <= k_a && k_a <= depth) {
        return Err(ModelError::IndexOrderViolation { k_a, k_b });
    }
    let mut z = Matrix::identity(net.shape.m);
    gates.mask_rows(example, k_b, &mut z);
    for j in (k_b + 1)..=k_a {
        z = net.w[j - 1].matmul(&z);
        gates.mask_rows(example, j, &mut z);
    }
    Ok(z)
}

/// Spectral norm of `Z_{k_a,k_b}` without materializing the product: the
/// chain is applied to vectors inside a power iteration.
pub fn z_spectral_norm(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    k_a: usize,
    k_b: usize,
) -> Result<f64, ModelError> {
    let depth = net.shape.depth;
    if !(1 <= k_b && k_b <= k_a && k_a <= depth) {
        return Err(ModelError::IndexOrderViolation { k_a, k_b });
    }
    let m = net.shape.m;
    if k_a == k_b {
        // Z_{k,k} = D_k, a 0/1 diagonal.
        return Ok(if gates.open_count(example, k_a) > 0 { 1.0 } else { 0.0 });
    }
    let apply = |block: &Matrix| {
        let mut cur = block.clone();
        gates.mask_rows(example, k_b, &mut cur);
        for j in (k_b + 1)..=k_a {
            cur = net.w[j - 1].matmul(&cur);
            gates.mask_rows(example, j, &mut cur);
        }
        cur
    };
    let apply_t = |block: &Matrix| {
        let mut cur = block.clone();
        gates.mask_rows(example, k_a, &mut cur);
        for j in ((k_b + 1)..=k_a).rev() {
            cur = net.w[j - 1].t_matmul(&cur);
            gates.mask_rows(example, j - 1, &mut cur);
        }
        cur
    };
    // Chain spectra have clustered edges; the blocked iteration reaches the
    // few digits the bound probes need quickly, and is exact on small nets.
    Ok(spectral_norm_block(m, m, 8, 1e-8, 600, apply, apply_t))
}

/// Gradient carrier vectors `v_k = F_{k+1}^T r` for `k` in `0..=L`, computed
/// by one backward sweep (`v_L = D_L B^T r`, `v_k = D_k W_{k+1}^T v_{k+1}`).
pub fn backward_vectors(
    net: &GReluNetwork,
    gates: &GatePattern,
    example: usize,
    r: &[f64],
) -> Vec<Vec<f64>> {
    let depth = net.shape.depth;
    let mut v = net.b.t_matvec(r);
    gates.mask_vec(example, depth, &mut v);
    let mut vs = vec![Vec::new(); depth + 1];
    vs[depth] = v;
    for k in (0..depth).rev() {
        let mut next = net.w[k].t_matvec(&vs[k + 1]);
        gates.mask_vec(example, k, &mut next);
        vs[k] = next;
    }
    vs
}

#[derive(Debug, Clone)]
pub struct ReluForwardPass {
    pub output: Vec<f64>,
    /// Pre-activation values `z_0..z_L`.
    pub pre: Vec<Vec<f64>>,
    /// Masks `1(z_k > 0)` recomputed from this pass, layers `0..=L`.
    pub masks: GatePattern,
}

impl ReluNetwork {
    pub fn from_parts(shape: NetworkShape, c: Matrix, b: Matrix, w: Vec<Matrix>) -> Self {
        assert_eq!(w.len(), shape.depth);
        ReluNetwork { shape, c, b, w }
    }
}

/// Conventional ReLU forward: masks derive from the net's own pre-activations
/// on every call, with the same strict-positivity convention as the gated
/// network (the subgradient at zero is taken as zero).
pub fn relu_forward(net: &ReluNetwork, x: &[f64]) -> Result<ReluForwardPass, ModelError> {
    check_input(net.shape.d_x, x)?;
    let depth = net.shape.depth;
    let mut masks = GatePattern::new_closed(1, depth + 1, net.shape.m);
    let mut pre = Vec::with_capacity(depth + 1);
    let mut z = net.c.matvec(x);
    for layer in 0..=depth {
        for (s, v) in z.iter().enumerate() {
            if *v > 0.0 {
                masks.set_open(0, layer, s);
            }
        }
        pre.push(z.clone());
        if layer < depth {
            let relu: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            z = net.w[layer].matvec(&relu);
        }
    }
    let output = net.b.matvec(pre.last().unwrap());
    Ok(ReluForwardPass { output, pre, masks })
}

/// ReLU-net masks over a whole dataset (rows of `x`), for drift measurements.
pub fn relu_masks_all(net: &ReluNetwork, x: &Matrix) -> Result<GatePattern, ModelError> {
    let depth = net.shape.depth;
    let mut gates = GatePattern::new_closed(x.rows(), depth + 1, net.shape.m);
    for i in 0..x.rows() {
        let pass = relu_forward(net, x.row(i))?;
        for layer in 0..=depth {
            for s in 0..net.shape.m {
                if pass.masks.is_open(0, layer, s) {
                    gates.set_open(i, layer, s);
                }
            }
        }
    }
    Ok(gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::norm2;

    fn unit_x(d: usize, seed: u64) -> Vec<f64> {
        let mut g = RngStream::new(seed, 77).gaussian_source();
        let mut x: Vec<f64> = (0..d).map(|_| g.next_standard_normal()).collect();
        let inv = 1.0 / norm2(&x);
        x.iter_mut().for_each(|v| *v *= inv);
        x
    }

    #[test]
    fn init_is_deterministic() {
        let shape = NetworkShape::new(5, 2, 16, 3);
        let a = init_network(shape, 9);
        let b = init_network(shape, 9);
        assert_eq!(a, b);
        let c = init_network(shape, 10);
        assert_ne!(a.c.data(), c.c.data());
    }

    #[test]
    fn init_variances_match_scheme() {
        let shape = NetworkShape::new(200, 4, 512, 2);
        let net = init_network(shape, 1);
        let var = |m: &Matrix| {
            let n = m.data().len() as f64;
            let mean = m.data().iter().sum::<f64>() / n;
            m.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
        };
        assert!((var(&net.c) - 2.0 / 200.0).abs() < 0.02 * (2.0 / 200.0));
        assert!((var(&net.w[0]) - 2.0 / 512.0).abs() < 0.02 * (2.0 / 512.0));
        assert!((var(&net.psi[1]) - 2.0 / 512.0).abs() < 0.02 * (2.0 / 512.0));
        assert!((var(&net.b) - 2.0 / 4.0).abs() < 0.05 * (2.0 / 4.0));
    }

    #[test]
    fn zero_input_closes_everything() {
        let net = init_network(NetworkShape::new(4, 1, 12, 2), 3);
        let gates = compute_gates(&net, &[0.0; 4]).unwrap();
        for k in 0..=2 {
            assert_eq!(gates.open_count(0, k), 0);
        }
        let pass = forward(&net, &gates, 0, &[0.0; 4]).unwrap();
        assert!(pass.output.iter().all(|v| *v == 0.0));
        assert!(pass.hidden.iter().all(|h| h.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn gates_ignore_trained_layers() {
        let net = init_network(NetworkShape::new(6, 1, 20, 3), 4);
        let x = unit_x(6, 1);
        let g1 = compute_gates(&net, &x).unwrap();
        let mut perturbed = net.clone();
        for w in &mut perturbed.w {
            w.scale(-3.5);
        }
        let g2 = compute_gates(&perturbed, &x).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn forward_matches_effective_matrix() {
        let net = init_network(NetworkShape::new(5, 3, 24, 3), 5);
        for seed in 0..20 {
            let x = unit_x(5, 100 + seed);
            let gates = compute_gates(&net, &x).unwrap();
            let pass = forward(&net, &gates, 0, &x).unwrap();
            let eff = effective_matrix(&net, &gates, 0);
            let via = eff.matvec(&x);
            for (a, b) in pass.output.iter().zip(&via) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        // Independent re-implementation that materializes the masked product.
        let net = init_network(NetworkShape::new(3, 2, 6, 2), 6);
        let x = unit_x(3, 7);
        let gates = compute_gates(&net, &x).unwrap();
        let pass = forward(&net, &gates, 0, &x).unwrap();

        let mask_diag = |layer: usize| {
            Matrix::from_fn(6, 6, |i, j| {
                if i == j && gates.is_open(0, layer, i) {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let mut prod = mask_diag(0).matmul(&net.c);
        for k in 0..2 {
            prod = mask_diag(k + 1).matmul(&net.w[k]).matmul(&prod);
        }
        let oracle = net.b.matmul(&prod).matvec(&x);
        for (a, b) in pass.output.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn effective_matrix_depth_one_expansion() {
        let net = init_network(NetworkShape::new(4, 2, 8, 1), 11);
        let x = unit_x(4, 2);
        let gates = compute_gates(&net, &x).unwrap();
        let eff = effective_matrix(&net, &gates, 0);
        assert_eq!((eff.rows(), eff.cols()), (2, 4));
        let d = |layer: usize| {
            Matrix::from_fn(8, 8, |i, j| if i == j && gates.is_open(0, layer, i) { 1.0 } else { 0.0 })
        };
        let explicit = net.b.matmul(&d(1)).matmul(&net.w[0]).matmul(&d(0)).matmul(&net.c);
        assert!(eff.max_abs_diff(&explicit) < 1e-12);
    }

    #[test]
    fn partition_identity_all_splits() {
        let net = init_network(NetworkShape::new(4, 2, 10, 3), 12);
        let x = unit_x(4, 3);
        let gates = compute_gates(&net, &x).unwrap();
        let eff = effective_matrix(&net, &gates, 0);
        for k in 0..=3 {
            let f = subnetwork_f(&net, &gates, 0, k + 1).unwrap();
            let g = subnetwork_g(&net, &gates, 0, k).unwrap();
            let prod = f.matmul(&g);
            let rel = prod.sub(&eff).frobenius_norm() / eff.frobenius_norm();
            assert!(rel < 1e-10, "split k={k}: rel {rel}");
        }
        assert!(subnetwork_f(&net, &gates, 0, 0).is_err());
        assert!(subnetwork_f(&net, &gates, 0, 5).is_err());
        assert!(subnetwork_g(&net, &gates, 0, 4).is_err());
    }

    #[test]
    fn f_boundary_is_masked_b_and_g_boundary_is_masked_c() {
        let net = init_network(NetworkShape::new(4, 2, 10, 2), 13);
        let x = unit_x(4, 4);
        let gates = compute_gates(&net, &x).unwrap();
        let f = subnetwork_f(&net, &gates, 0, 3).unwrap();
        let mut expect = net.b.clone();
        gates.mask_cols(0, 2, &mut expect);
        assert!(f.max_abs_diff(&expect) == 0.0);
        let g = subnetwork_g(&net, &gates, 0, 0).unwrap();
        let mut expect = net.c.clone();
        gates.mask_rows(0, 0, &mut expect);
        assert!(g.max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn intermediate_z_recursion_and_diagonal() {
        let net = init_network(NetworkShape::new(4, 1, 9, 3), 14);
        let x = unit_x(4, 5);
        let gates = compute_gates(&net, &x).unwrap();
        // Z_{k,k} = D_k with spectral norm <= 1
        let z11 = intermediate_z(&net, &gates, 0, 1, 1).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let expect = if i == j && gates.is_open(0, 1, i) { 1.0 } else { 0.0 };
                assert_eq!(z11[(i, j)], expect);
            }
        }
        assert!(z_spectral_norm(&net, &gates, 0, 1, 1).unwrap() <= 1.0);
        // Z_{ka,kb} = D_ka W_ka Z_{ka-1,kb}
        let z31 = intermediate_z(&net, &gates, 0, 3, 1).unwrap();
        let z21 = intermediate_z(&net, &gates, 0, 2, 1).unwrap();
        let mut rec = net.w[2].matmul(&z21);
        gates.mask_rows(0, 3, &mut rec);
        assert!(z31.max_abs_diff(&rec) < 1e-12);
        // matvec-based norm agrees with the materialized product
        let dense = crate::linalg::spectral_norm(&z31);
        let lazy = z_spectral_norm(&net, &gates, 0, 3, 1).unwrap();
        assert!((dense - lazy).abs() <= 1e-8 * dense.max(1e-12));
        assert!(intermediate_z(&net, &gates, 0, 1, 2).is_err());
        assert!(intermediate_z(&net, &gates, 0, 3, 0).is_err());
    }

    #[test]
    fn linearity_in_x_at_fixed_gates() {
        let net = init_network(NetworkShape::new(5, 2, 14, 2), 15);
        let x = unit_x(5, 6);
        let gates = compute_gates(&net, &x).unwrap();
        let base = forward(&net, &gates, 0, &x).unwrap();
        let eff = effective_matrix(&net, &gates, 0);
        for a in [0.5, -2.0, 3.25] {
            let xs: Vec<f64> = x.iter().map(|v| a * v).collect();
            let scaled = eff.matvec(&xs);
            for (s, b) in scaled.iter().zip(&base.output) {
                assert!((s - a * b).abs() < 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn relu_forward_zero_and_fully_open() {
        let net = init_network(NetworkShape::new(4, 2, 8, 2), 16);
        let relu = ReluNetwork::from_parts(net.shape, net.c.clone(), net.b.clone(), net.w.clone());
        let pass = relu_forward(&relu, &[0.0; 4]).unwrap();
        assert!(pass.output.iter().all(|v| *v == 0.0));

        // All-positive weights and input open every gate, so the output is
        // the plain unmasked linear product.
        let pos = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].abs() + 0.1);
        let relu_pos = ReluNetwork::from_parts(
            net.shape,
            pos(&net.c),
            pos(&net.b),
            net.w.iter().map(pos).collect(),
        );
        let x = vec![0.5, 0.25, 0.125, 0.0625];
        let pass = relu_forward(&relu_pos, &x).unwrap();
        let lin = relu_pos
            .b
            .matmul(&relu_pos.w[1])
            .matmul(&relu_pos.w[0])
            .matmul(&relu_pos.c)
            .matvec(&x);
        for (a, b) in pass.output.iter().zip(&lin) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn relu_forward_matches_straight_line_oracle() {
        let net = init_network(NetworkShape::new(3, 2, 6, 2), 17);
        let relu = ReluNetwork::from_parts(net.shape, net.c.clone(), net.b.clone(), net.w.clone());
        let x = unit_x(3, 8);
        let pass = relu_forward(&relu, &x).unwrap();
        let mut z = relu.c.matvec(&x);
        for k in 0..2 {
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            z = relu.w[k].matvec(&a);
        }
        let out = relu.b.matvec(&z);
        for (a, b) in pass.output.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
        // perturbing the trained layers changes relu masks but never gated ones
        let mut bumped = relu.clone();
        bumped.w[0].scale(-1.0);
        let pass2 = relu_forward(&bumped, &x).unwrap();
        assert_ne!(pass.masks, pass2.masks);
    }

    #[test]
    fn gate_bit_packing_round_trips() {
        for (d, m, depth, seed) in [(4usize, 9usize, 2usize, 31u64), (3, 64, 1, 32), (5, 70, 3, 33)] {
            let net = init_network(NetworkShape::new(d, 1, m, depth), seed);
            let mut x = Matrix::zeros(3, d);
            for i in 0..3 {
                let row = unit_x(d, seed + i as u64);
                x.row_mut(i).copy_from_slice(&row);
            }
            let gates = compute_gates_all(&net, &x).unwrap();
            let bytes = gates.pack_bytes();
            let back = GatePattern::unpack_bytes(3, depth + 1, m, &bytes).unwrap();
            assert_eq!(gates, back);
        }
        assert!(GatePattern::unpack_bytes(1, 2, 9, &[0u8; 3]).is_none());
    }

    #[test]
    fn backward_vectors_match_f_transpose() {
        let net = init_network(NetworkShape::new(4, 2, 9, 3), 18);
        let x = unit_x(4, 9);
        let gates = compute_gates(&net, &x).unwrap();
        let r = vec![0.7, -1.3];
        let vs = backward_vectors(&net, &gates, 0, &r);
        for k in 0..=3 {
            let f = subnetwork_f(&net, &gates, 0, k + 1).unwrap();
            let expect = f.t_matvec(&r);
            for (a, b) in vs[k].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k}");
            }
        }
    }
}
