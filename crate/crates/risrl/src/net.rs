//! Neural function approximation: multilayer perceptrons, reverse-mode
//! gradients on a tape of batch-matrix operations, bias-corrected
//! adaptive-moment optimization and exponential target blending.
//!
//! Matrices are laid out (feature rows x batch columns) so a whole batch
//! moves through each layer as one matrix product. Losses are built on a
//! [`Tape`]; parameters registered as trainable leaves receive gradients,
//! parameters inserted as constants are frozen (target networks, critics
//! inside policy losses).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite intermediate in op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// Column-per-sample batch from a slice of equally sized vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Mat {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.data[i * cols + j] = v;
            }
        }
        m
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C += A * B
fn matmul_nn_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.rows);
    for i in 0..a.rows {
        let c_row = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// C += A * B^T
fn matmul_nt_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.cols);
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let b_row = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c.data[i * b.rows + j] += acc;
        }
    }
}

/// C += A^T * B
fn matmul_tn_acc(c: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.rows, b.rows);
    for k in 0..a.rows {
        let a_row = &a.data[k * a.cols..(k + 1) * a.cols];
        let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
        for (i, av) in a_row.iter().enumerate() {
            let c_row = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_nn_acc(&mut c, a, b);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

// Some op payloads are kept for the op's record even where the backward
// pass recomputes from stored values instead.
#[allow(dead_code)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    /// A (m x n) plus column vector b (m x 1) broadcast across columns.
    AddCol(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    /// Elementwise min; ties route the gradient to the first argument.
    MinElem(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// Per-row affine y_i = scale_i * x_i + shift_i.
    RowAffine(NodeId, Vec<f64>, Vec<f64>),
    /// Pass-through gradient inside [lo, hi], zero outside.
    Clamp(NodeId, f64, f64),
    RowSlice(NodeId, usize, usize),
    ConcatRows(NodeId, NodeId),
    /// (m x n) -> (1 x n) column sums over rows.
    SumRows(NodeId),
    MeanAll(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddCol(..) => "add_col",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul",
            Op::MinElem(..) => "min",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::RowAffine(..) => "row_affine",
            Op::Clamp(..) => "clamp",
            Op::RowSlice(..) => "row_slice",
            Op::ConcatRows(..) => "concat_rows",
            Op::SumRows(..) => "sum_rows",
            Op::MeanAll(..) => "mean",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Reverse-mode tape over batch matrices.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.value(id).data.len(), 1);
        self.value(id).data[0]
    }

    pub fn param(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf { trainable: true })
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf { trainable: false })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.value(a), self.value(b));
        debug_assert_eq!(bm.cols, 1);
        debug_assert_eq!(am.rows, bm.rows);
        let mut v = am.clone();
        for i in 0..v.rows {
            let bi = bm.data[i];
            for x in &mut v.data[i * v.cols..(i + 1) * v.cols] {
                *x += bi;
            }
        }
        self.push(v, Op::AddCol(a, b))
    }

    fn zip_elem(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (am, bm) = (self.value(a), self.value(b));
        debug_assert_eq!((am.rows, am.cols), (bm.rows, bm.cols));
        let data = am.data.iter().zip(&bm.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Mat::from_vec(am.rows, am.cols, data);
        self.push(v, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elem(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elem(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elem(a, b, |x, y| x * y, Op::MulElem(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elem(a, b, f64::min, Op::MinElem(a, b))
    }

    fn map_elem(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let am = self.value(a);
        let data = am.data.iter().map(|&x| f(x)).collect();
        let v = Mat::from_vec(am.rows, am.cols, data);
        self.push(v, op)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_elem(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_elem(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map_elem(a, f64::ln, Op::Ln(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_elem(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_elem(a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn row_affine(&mut self, a: NodeId, scale: Vec<f64>, shift: Vec<f64>) -> NodeId {
        let am = self.value(a);
        debug_assert_eq!(am.rows, scale.len());
        let mut v = am.clone();
        for i in 0..v.rows {
            for x in &mut v.data[i * v.cols..(i + 1) * v.cols] {
                *x = scale[i] * *x + shift[i];
            }
        }
        self.push(v, Op::RowAffine(a, scale, shift))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map_elem(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let am = self.value(a);
        let cols = am.cols;
        let data = am.data[start * cols..(start + len) * cols].to_vec();
        let v = Mat::from_vec(len, cols, data);
        self.push(v, Op::RowSlice(a, start, len))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.value(a), self.value(b));
        debug_assert_eq!(am.cols, bm.cols);
        let mut data = am.data.clone();
        data.extend_from_slice(&bm.data);
        let v = Mat::from_vec(am.rows + bm.rows, am.cols, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let mut v = Mat::zeros(1, am.cols);
        for i in 0..am.rows {
            for j in 0..am.cols {
                v.data[j] += am.data[i * am.cols + j];
            }
        }
        self.push(v, Op::SumRows(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let mean = am.data.iter().sum::<f64>() / am.data.len() as f64;
        self.push(Mat::from_vec(1, 1, vec![mean]), Op::MeanAll(a))
    }

    /// Reverse pass seeding the (scalar) loss node with 1. Returns one
    /// gradient slot per node; untouched slots are zero matrices.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Mat>, NetError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(NetError::NonFinite { op: node.op.name(), node: i });
            }
        }
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows, n.value.cols))
            .collect();
        debug_assert_eq!(self.value(loss).data.len(), 1, "loss must be scalar");
        grads[loss.0].data[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if grads[i].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    matmul_nt_acc(&mut grads[a.0], &g, bv);
                    matmul_tn_acc(&mut grads[b.0], av, &g);
                }
                Op::AddCol(a, b) => {
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *ga += gv;
                    }
                    let gb = &mut grads[b.0];
                    for r in 0..g.rows {
                        gb.data[r] += g.data[r * g.cols..(r + 1) * g.cols].iter().sum::<f64>();
                    }
                }
                Op::Add(a, b) => {
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *ga += gv;
                    }
                    for (gb, gv) in grads[b.0].data.iter_mut().zip(&g.data) {
                        *gb += gv;
                    }
                }
                Op::Sub(a, b) => {
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *ga += gv;
                    }
                    for (gb, gv) in grads[b.0].data.iter_mut().zip(&g.data) {
                        *gb -= gv;
                    }
                }
                Op::MulElem(a, b) => {
                    let bv = self.nodes[b.0].value.data.clone();
                    for ((ga, gv), x) in grads[a.0].data.iter_mut().zip(&g.data).zip(&bv) {
                        *ga += gv * x;
                    }
                    let av = self.nodes[a.0].value.data.clone();
                    for ((gb, gv), x) in grads[b.0].data.iter_mut().zip(&g.data).zip(&av) {
                        *gb += gv * x;
                    }
                }
                Op::MinElem(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data.clone(), self.nodes[b.0].value.data.clone());
                    for (k, gv) in g.data.iter().enumerate() {
                        if av[k] <= bv[k] {
                            grads[a.0].data[k] += gv;
                        } else {
                            grads[b.0].data[k] += gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data.clone();
                    for ((ga, gv), t) in grads[a.0].data.iter_mut().zip(&g.data).zip(&y) {
                        *ga += gv * (1.0 - t * t);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data.clone();
                    for ((ga, gv), e) in grads[a.0].data.iter_mut().zip(&g.data).zip(&y) {
                        *ga += gv * e;
                    }
                }
                Op::Ln(a) => {
                    let x = self.nodes[a.0].value.data.clone();
                    for ((ga, gv), xv) in grads[a.0].data.iter_mut().zip(&g.data).zip(&x) {
                        *ga += gv / xv;
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *ga += c * gv;
                    }
                }
                Op::AddConst(a, _) => {
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data) {
                        *ga += gv;
                    }
                }
                Op::RowAffine(a, scale, _) => {
                    let ga = &mut grads[a.0];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] += scale[r] * g.data[r * g.cols + c];
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[a.0].value.data.clone();
                    for ((ga, gv), xv) in grads[a.0].data.iter_mut().zip(&g.data).zip(&x) {
                        if *xv >= *lo && *xv <= *hi {
                            *ga += gv;
                        }
                    }
                }
                Op::RowSlice(a, start, len) => {
                    let cols = g.cols;
                    let ga = &mut grads[a.0];
                    for k in 0..len * cols {
                        ga.data[start * cols + k] += g.data[k];
                    }
                }
                Op::ConcatRows(a, b) => {
                    let a_len = grads[a.0].data.len();
                    for (ga, gv) in grads[a.0].data.iter_mut().zip(&g.data[..a_len]) {
                        *ga += gv;
                    }
                    for (gb, gv) in grads[b.0].data.iter_mut().zip(&g.data[a_len..]) {
                        *gb += gv;
                    }
                }
                Op::SumRows(a) => {
                    let ga = &mut grads[a.0];
                    let rows = ga.rows;
                    for r in 0..rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] += g.data[c];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let ga = &mut grads[a.0];
                    let n = ga.data.len() as f64;
                    let gv = g.data[0] / n;
                    for x in &mut ga.data {
                        *x += gv;
                    }
                }
            }
        }
        Ok(grads)
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Output head of an MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Head {
    /// Raw affine outputs (critics).
    Linear,
    /// tanh squashed into [low, high] per output dimension (deterministic
    /// policies).
    TanhBounded { low: Vec<f64>, high: Vec<f64> },
    /// Gaussian in pre-squash space, tanh squashed into [low, high]
    /// (stochastic policies). The final layer emits mean rows then
    /// log-std rows.
    SquashedGaussian { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
    pub weights: Vec<Mat>,
    pub biases: Vec<Mat>,
}

/// Trainable parameter nodes of one MLP registered on a tape.
pub struct MlpParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Mlp {
    /// Fresh network with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init.
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, head: Head, rng: &mut impl Rng) -> Mlp {
        let final_rows = match head {
            Head::SquashedGaussian { .. } => 2 * output_dim,
            _ => output_dim,
        };
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(final_rows);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut wm = Mat::zeros(fan_out, fan_in);
            for v in &mut wm.data {
                *v = rng.gen_range(-bound..bound);
            }
            let mut bm = Mat::zeros(fan_out, 1);
            for v in &mut bm.data {
                *v = rng.gen_range(-bound..bound);
            }
            weights.push(wm);
            biases.push(bm);
        }
        Mlp { input_dim, hidden: hidden.to_vec(), output_dim, head, weights, biases }
    }

    fn bounds(&self) -> (&[f64], &[f64]) {
        match &self.head {
            Head::TanhBounded { low, high } | Head::SquashedGaussian { low, high } => (low, high),
            Head::Linear => panic!("linear head has no bounds"),
        }
    }

    fn squash_consts(&self) -> (Vec<f64>, Vec<f64>) {
        let (low, high) = self.bounds();
        let scale: Vec<f64> = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
        let shift: Vec<f64> = low.iter().zip(high).map(|(l, h)| 0.5 * (h + l)).collect();
        (scale, shift)
    }

    /// Plain trunk forward (no tape): affine + tanh per hidden layer,
    /// affine final layer.
    pub fn trunk(&self, input: &Mat) -> Mat {
        assert_eq!(input.rows, self.input_dim, "input dimension mismatch");
        let mut x = input.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = matmul(w, &x);
            for i in 0..y.rows {
                let bi = b.data[i];
                for v in &mut y.data[i * y.cols..(i + 1) * y.cols] {
                    *v += bi;
                    if l < last {
                        *v = v.tanh();
                    }
                }
            }
            x = y;
        }
        x
    }

    /// Critic output (linear head), shape (output_dim x batch).
    pub fn value(&self, input: &Mat) -> Mat {
        debug_assert!(matches!(self.head, Head::Linear));
        self.trunk(input)
    }

    /// Deterministic bounded action (tanh head), or the squashed mean for
    /// a Gaussian head.
    pub fn action(&self, input: &Mat) -> Mat {
        let z = self.trunk(input);
        let (scale, shift) = self.squash_consts();
        let d = self.output_dim;
        let mut out = Mat::zeros(d, z.cols);
        for i in 0..d {
            for j in 0..z.cols {
                out.data[i * z.cols + j] = scale[i] * z.at(i, j).tanh() + shift[i];
            }
        }
        out
    }

    /// Sample squashed-Gaussian actions and their log-densities (no
    /// gradients). Returns (action, log_prob) with log_prob shaped 1 x batch.
    pub fn sample(&self, input: &Mat, rng: &mut impl Rng) -> (Mat, Mat) {
        let eps = standard_normal(self.output_dim, input.cols, rng);
        self.sample_with_noise(input, &eps)
    }

    /// Deterministic counterpart of [`Mlp::sample`] given the noise matrix.
    pub fn sample_with_noise(&self, input: &Mat, eps: &Mat) -> (Mat, Mat) {
        let z = self.trunk(input);
        let d = self.output_dim;
        let (scale, shift) = self.squash_consts();
        let mut action = Mat::zeros(d, z.cols);
        let mut logp = Mat::zeros(1, z.cols);
        for j in 0..z.cols {
            for i in 0..d {
                let mean = z.at(i, j);
                let log_std = z.at(d + i, j).clamp(LOG_STD_MIN, LOG_STD_MAX);
                let std = log_std.exp();
                let e = eps.at(i, j);
                let pre = mean + std * e;
                let t = pre.tanh();
                action.data[i * z.cols + j] = scale[i] * t + shift[i];
                logp.data[j] += -0.5 * e * e - log_std - 0.5 * LN_2PI
                    - (scale[i] * (1.0 - t * t) + SQUASH_EPS).ln();
            }
        }
        (action, logp)
    }

    /// Register this network's parameters as trainable tape leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpParams {
        MlpParams {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// Trunk forward on the tape. With `params: None` the layer weights
    /// enter as constants, so no gradient reaches this network (frozen
    /// critic or target); the input node still receives gradients.
    pub fn trunk_tape(&self, tape: &mut Tape, input: NodeId, params: Option<&MlpParams>) -> NodeId {
        let last = self.weights.len() - 1;
        let mut x = input;
        for l in 0..self.weights.len() {
            let (w, b) = match params {
                Some(p) => (p.weights[l], p.biases[l]),
                None => {
                    let w = tape.constant(self.weights[l].clone());
                    let b = tape.constant(self.biases[l].clone());
                    (w, b)
                }
            };
            let y = tape.matmul(w, x);
            let y = tape.add_col(y, b);
            x = if l < last { tape.tanh(y) } else { y };
        }
        x
    }

    /// Deterministic bounded action on the tape (tanh head).
    pub fn action_tape(&self, tape: &mut Tape, input: NodeId, params: Option<&MlpParams>) -> NodeId {
        let z = self.trunk_tape(tape, input, params);
        let t = tape.tanh(z);
        let (scale, shift) = self.squash_consts();
        tape.row_affine(t, scale, shift)
    }

    /// Reparameterized squashed-Gaussian sample on the tape. `eps` must be
    /// a (output_dim x batch) standard-normal draw made outside the tape.
    /// Returns (action, log_prob) node ids.
    pub fn sample_tape(
        &self,
        tape: &mut Tape,
        input: NodeId,
        eps: &Mat,
        params: Option<&MlpParams>,
    ) -> (NodeId, NodeId) {
        let d = self.output_dim;
        let z = self.trunk_tape(tape, input, params);
        let mean = tape.row_slice(z, 0, d);
        let log_std_raw = tape.row_slice(z, d, d);
        let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let eps_node = tape.constant(eps.clone());
        let noise = tape.mul(std, eps_node);
        let pre = tape.add(mean, noise);
        let t = tape.tanh(pre);
        let (scale, shift) = self.squash_consts();
        let action = tape.row_affine(t, scale.clone(), shift);

        // log N(pre; mean, std) = -eps^2/2 - log_std - ln(2*pi)/2, with the
        // tanh + affine change of variables subtracted per dimension.
        let eps_sq: Vec<f64> = eps.data.iter().map(|e| -0.5 * e * e - 0.5 * LN_2PI).collect();
        let gauss_const = tape.constant(Mat::from_vec(d, eps.cols, eps_sq));
        let gauss = tape.sub(gauss_const, log_std);
        let t_sq = tape.mul(t, t);
        let neg_tsq = tape.scale(t_sq, -1.0);
        let one_minus = tape.add_const(neg_tsq, 1.0);
        let jac = tape.row_affine(one_minus, scale, vec![SQUASH_EPS; d]);
        let ln_jac = tape.ln(jac);
        let per_dim = tape.sub(gauss, ln_jac);
        let logp = tape.sum_rows(per_dim);
        (action, logp)
    }

    /// All parameters flattened in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.data.len();
            w.data.copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = b.data.len();
            b.data.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        debug_assert_eq!(offset, flat.len());
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.data.len()).sum::<usize>()
    }
}

const LN_2PI: f64 = 1.8378770664093453;
const SQUASH_EPS: f64 = 1e-6;

/// Seeded standard-normal matrix (Box-Muller over the given RNG stream).
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    m
}

/// Gradient of `net`'s parameters from a backward pass, flattened to match
/// [`Mlp::flatten`].
pub fn grad_flat(grads: &[Mat], params: &MlpParams) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in params.weights.iter().zip(&params.biases) {
        out.extend_from_slice(&grads[w.0].data);
        out.extend_from_slice(&grads[b.0].data);
    }
    out
}

/// Builds a scalar loss on a fresh tape and returns its value together
/// with the flattened parameter gradient.
pub fn gradient<F>(build: F) -> Result<(f64, Vec<f64>), NetError>
where
    F: FnOnce(&mut Tape) -> (NodeId, MlpParams),
{
    let mut tape = Tape::new();
    let (loss, params) = build(&mut tape);
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grad_flat(&grads, &params)))
}

/// Bias-corrected adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// target <- tau * live + (1 - tau) * target, elementwise.
pub fn soft_update(target: &mut Mlp, live: &Mlp, tau: f64) {
    assert!(tau > 0.0 && tau <= 1.0 || tau == 0.0);
    for (tw, lw) in target.weights.iter_mut().zip(&live.weights) {
        assert_eq!((tw.rows, tw.cols), (lw.rows, lw.cols), "target shape mismatch");
        for (t, l) in tw.data.iter_mut().zip(&lw.data) {
            *t = tau * l + (1.0 - tau) * *t;
        }
    }
    for (tb, lb) in target.biases.iter_mut().zip(&live.biases) {
        for (t, l) in tb.data.iter_mut().zip(&lb.data) {
            *t = tau * l + (1.0 - tau) * *t;
        }
    }
}

/// Versioned checkpoint: named networks plus named scalars (temperature,
/// multiplier, step counters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env_id: String,
    pub nets: std::collections::BTreeMap<String, Mlp>,
    pub scalars: std::collections::BTreeMap<String, f64>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(env_id: &str) -> Checkpoint {
        Checkpoint {
            version: Self::VERSION,
            env_id: env_id.to_string(),
            nets: Default::default(),
            scalars: Default::default(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != Self::VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported checkpoint version {}", ckpt.version),
            ));
        }
        Ok(ckpt)
    }
}

/// Central finite-difference gradient of `loss` at `params` (test oracle).
pub fn finite_difference<F>(params: &[f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = loss(&p);
        p[i] = orig - step;
        let lo = loss(&p);
        p[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let mut net = Mlp::new(3, &[4], 1, Head::Linear, &mut rng(0));
        let zeros = vec![0.0; net.param_count()];
        net.set_from_flat(&zeros);
        let out = net.value(&Mat::from_columns(&[vec![1.0, -2.0, 3.0]]));
        assert_eq!(out.data, vec![0.0]);
    }

    #[test]
    fn affine_evaluation() {
        let mut net = Mlp::new(1, &[], 1, Head::Linear, &mut rng(0));
        net.weights[0].data[0] = 2.0;
        net.biases[0].data[0] = 1.0;
        let out = net.value(&Mat::from_columns(&[vec![3.0]]));
        assert_eq!(out.data, vec![7.0]);
    }

    #[test]
    fn vanishing_variance_sampling_is_deterministic() {
        let mut net = Mlp::new(2, &[], 1, Head::SquashedGaussian { low: vec![-1.0], high: vec![1.0] }, &mut rng(0));
        // zero mean, log-std pinned far below the clamp floor
        let zeros = vec![0.0; net.param_count()];
        net.set_from_flat(&zeros);
        net.biases[0].data[1] = -50.0; // log-std row, clamped to -20
        let mut r = rng(1);
        let (a, _) = net.sample(&Mat::from_columns(&[vec![0.3, -0.7]]), &mut r);
        assert!(a.data[0].abs() < 1e-8);
    }

    #[test]
    fn gradient_of_square() {
        // loss = w^2 at w = 3 -> gradient 6
        let (loss, grad) = gradient(|tape| {
            let mut net = Mlp::new(1, &[], 1, Head::Linear, &mut rng(0));
            net.weights[0].data[0] = 3.0;
            net.biases[0].data[0] = 0.0;
            let params = net.register(tape);
            let x = tape.constant(Mat::from_vec(1, 1, vec![1.0]));
            let y = net.trunk_tape(tape, x, Some(&params));
            let sq = tape.mul(y, y);
            (tape.mean_all(sq), params)
        })
        .unwrap();
        assert!((loss - 9.0).abs() < 1e-12);
        assert!((grad[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_tanh_at_zero() {
        let (loss, grad) = gradient(|tape| {
            let mut net = Mlp::new(1, &[], 1, Head::Linear, &mut rng(0));
            net.weights[0].data[0] = 0.0;
            net.biases[0].data[0] = 0.0;
            let params = net.register(tape);
            let x = tape.constant(Mat::from_vec(1, 1, vec![1.0]));
            let y = net.trunk_tape(tape, x, Some(&params));
            let t = tape.tanh(y);
            (tape.mean_all(t), params)
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!((grad[0] - 1.0).abs() < 1e-12); // tanh'(0) = 1
    }

    fn relative_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn gradient_matches_finite_differences_mlp() {
        let mut r = rng(42);
        let net = Mlp::new(3, &[8, 8], 2, Head::Linear, &mut r);
        let input = Mat::from_columns(&[vec![0.3, -0.5, 0.8], vec![-0.1, 0.9, 0.2]]);
        let loss_of = |flat: &[f64]| {
            let mut n = net.clone();
            n.set_from_flat(flat);
            let out = n.value(&input);
            out.data.iter().map(|v| v * v).sum::<f64>() / out.data.len() as f64
        };
        let (_, grad) = gradient(|tape| {
            let params = net.register(tape);
            let x = tape.constant(input.clone());
            let y = net.trunk_tape(tape, x, Some(&params));
            let sq = tape.mul(y, y);
            (tape.mean_all(sq), params)
        })
        .unwrap();
        let fd = finite_difference(&net.flatten(), 1e-5, loss_of);
        assert!(relative_err(&grad, &fd) < 1e-6, "err {}", relative_err(&grad, &fd));
    }

    #[test]
    fn gradient_matches_finite_differences_gaussian_head() {
        let mut r = rng(7);
        let net = Mlp::new(2, &[6], 1, Head::SquashedGaussian { low: vec![-1.0], high: vec![1.0] }, &mut r);
        let input = Mat::from_columns(&[vec![0.4, -0.2], vec![-0.6, 0.1], vec![0.0, 0.9]]);
        let eps = standard_normal(1, 3, &mut r);
        // loss = mean(logp) + mean(action^2)
        let loss_of = |flat: &[f64]| {
            let mut n = net.clone();
            n.set_from_flat(flat);
            let (a, lp) = n.sample_with_noise(&input, &eps);
            lp.data.iter().sum::<f64>() / 3.0 + a.data.iter().map(|v| v * v).sum::<f64>() / 3.0
        };
        let (_, grad) = gradient(|tape| {
            let params = net.register(tape);
            let x = tape.constant(input.clone());
            let (a, lp) = net.sample_tape(tape, x, &eps, Some(&params));
            let a_sq = tape.mul(a, a);
            let a_term = tape.mean_all(a_sq);
            let lp_term = tape.mean_all(lp);
            let loss = tape.add(a_term, lp_term);
            (loss, params)
        })
        .unwrap();
        let fd = finite_difference(&net.flatten(), 1e-6, loss_of);
        assert!(relative_err(&grad, &fd) < 1e-4, "err {}", relative_err(&grad, &fd));
    }

    #[test]
    fn tape_and_plain_gaussian_sampling_agree() {
        let mut r = rng(13);
        let net = Mlp::new(2, &[6], 2, Head::SquashedGaussian { low: vec![-2.0, 0.0], high: vec![1.0, 3.0] }, &mut r);
        let input = Mat::from_columns(&[vec![0.4, -0.2], vec![0.7, 0.3]]);
        let eps = standard_normal(2, 2, &mut r);
        let (a_plain, lp_plain) = net.sample_with_noise(&input, &eps);
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let (a, lp) = net.sample_tape(&mut tape, x, &eps, None);
        for (x, y) in tape.value(a).data.iter().zip(&a_plain.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tape.value(lp).data.iter().zip(&lp_plain.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn squashed_outputs_respect_bounds() {
        let mut r = rng(99);
        let net = Mlp::new(3, &[8], 2, Head::SquashedGaussian { low: vec![-1.0, -0.5], high: vec![1.0, 0.5] }, &mut r);
        let det = Mlp::new(3, &[8], 2, Head::TanhBounded { low: vec![-1.0, -0.5], high: vec![1.0, 0.5] }, &mut r);
        for _ in 0..10_000 {
            let input = Mat::from_columns(&[vec![
                r.gen_range(-10.0..10.0),
                r.gen_range(-10.0..10.0),
                r.gen_range(-10.0..10.0),
            ]]);
            let (a, _) = net.sample(&input, &mut r);
            assert!(a.data[0] > -1.0 && a.data[0] < 1.0);
            assert!(a.data[1] > -0.5 && a.data[1] < 0.5);
            let a = det.action(&input);
            assert!(a.data[0] > -1.0 && a.data[0] < 1.0);
            assert!(a.data[1] > -0.5 && a.data[1] < 0.5);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut adam = AdamState::new(1, 1e-3);
        let mut p = vec![0.5];
        adam.step(&mut p, &[1.0]);
        // bias-corrected first step is -lr * g/|g| up to eps
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_no_change() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_second_step_not_larger() {
        let mut adam = AdamState::new(1, 1e-3);
        let mut p = vec![0.0];
        adam.step(&mut p, &[2.0]);
        let first = p[0].abs();
        let before = p[0];
        adam.step(&mut p, &[2.0]);
        let second = (p[0] - before).abs();
        assert!(second <= first * 1.01);
    }

    #[test]
    fn soft_update_blend() {
        let mut r = rng(1);
        let live = Mlp::new(2, &[3], 1, Head::Linear, &mut r);
        let mut target = Mlp::new(2, &[3], 1, Head::Linear, &mut r);

        let before = target.flatten();
        soft_update(&mut target, &live, 0.0);
        assert_eq!(target.flatten(), before);

        soft_update(&mut target, &live, 1.0);
        assert_eq!(target.flatten(), live.flatten());

        let mut t2 = live.clone();
        let zeros = vec![0.0; t2.param_count()];
        t2.set_from_flat(&zeros);
        soft_update(&mut t2, &live, 0.005);
        for (t, l) in t2.flatten().iter().zip(live.flatten()) {
            assert!((t - 0.005 * l).abs() < 1e-15);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let mut r = rng(5);
            let mut net = Mlp::new(2, &[8], 1, Head::Linear, &mut r);
            let mut adam = AdamState::new(net.param_count(), 3e-4);
            for _ in 0..20 {
                let input = standard_normal(2, 16, &mut r);
                let target = standard_normal(1, 16, &mut r);
                let mut tape = Tape::new();
                let params = net.register(&mut tape);
                let x = tape.constant(input);
                let y = net.trunk_tape(&mut tape, x, Some(&params));
                let t = tape.constant(target);
                let d = tape.sub(y, t);
                let sq = tape.mul(d, d);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss).unwrap();
                let g = grad_flat(&grads, &params);
                let mut flat = net.flatten();
                adam.step(&mut flat, &g);
                net.set_from_flat(&flat);
            }
            net.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::from_vec(1, 1, vec![-1.0]));
        let l = tape.ln(x); // NaN
        let loss = tape.mean_all(l);
        match tape.backward(loss) {
            Err(NetError::NonFinite { op: "ln", .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(3);
        let net = Mlp::new(2, &[4], 1, Head::Linear, &mut r);
        let mut ckpt = Checkpoint::new("double_integrator");
        ckpt.nets.insert("critic".into(), net.clone());
        ckpt.scalars.insert("alpha".into(), 0.2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.nets["critic"].flatten(), net.flatten());
        assert_eq!(loaded.scalars["alpha"], 0.2);
    }
}
