//! Dense rank-≤2 tensors of `f64` with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations as they execute (define-by-run); [`Tape::backward`]
//! replays them in reverse to accumulate gradients. Tensors are plain row-major
//! buffers plus an optional handle into the tape that produced them, so values can
//! be moved freely between tapes: an operation that receives a tensor from another
//! tape (or none) treats it as a constant leaf.
//!
//! The op set is exactly what the goal-planning network needs: matmul, transpose,
//! elementwise add/mul, scalar scale, sigmoid/tanh, row softmax, cross-entropy
//! against a constant target, full sum, column concatenation, and row gather for
//! embedding lookups. Everything is `f64`; every operation checks its output for
//! non-finite values.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Probabilities below this are clamped inside cross-entropy before the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("numeric overflow in {op}: non-finite value produced")]
    NumericOverflow { op: &'static str },
    #[error("backward root must be a scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("row index {index} out of bounds for tensor with {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
    #[error("empty row selection")]
    EmptySelection,
}

/// Handle identifying a tensor inside one tape's computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    tape: u64,
    idx: usize,
}

/// Dense row-major matrix of 64-bit reals. Vectors are 1×n.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor {
            rows,
            cols,
            data,
            node: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(1, n, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    /// Index of the largest element; ties break toward the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn node_id(&self) -> Option<NodeRef> {
        self.node
    }

    /// Copy of this tensor detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
            node: None,
        }
    }
}

/// Elementwise activation kinds used by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Numerically stable logistic function (branch form).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    /// Inputs: probability node, constant target distribution.
    CrossEntropy(usize, Tensor),
    Sum(usize),
    ConcatCols(usize, usize),
    SelectRows(usize, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Append-only record of one forward computation.
///
/// Node ids are topologically ordered: every input id of node `k` is `< k`.
/// A tape is confined to one thread; independent tapes may run in parallel.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record `value` as a leaf (parameter or input) on this tape.
    pub fn leaf(&mut self, value: Tensor) -> Result<Tensor, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NumericOverflow { op: "leaf" });
        }
        Ok(self.push(Op::Leaf, value.detached()))
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> Tensor {
        let idx = self.nodes.len();
        value.node = Some(NodeRef { tape: self.id, idx });
        self.nodes.push(Node {
            op,
            value: value.clone(),
        });
        value
    }

    /// Node index of `t` on this tape; foreign or detached tensors become
    /// constant leaves.
    fn node_of(&mut self, t: &Tensor) -> usize {
        match t.node {
            Some(NodeRef { tape, idx }) if tape == self.id => idx,
            _ => {
                let leafed = self.push(Op::Leaf, t.detached());
                leafed.node.unwrap().idx
            }
        }
    }

    fn value(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn check_finite(&mut self, t: Tensor, op: &'static str) -> Result<Tensor, TensorError> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(TensorError::NumericOverflow { op })
        }
    }

    /// Matrix product. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.cols != b.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ai, bi) = (self.node_of(a), self.node_of(b));
        let (av, bv) = (self.value(ai), self.value(bi));
        let out = Tensor::from_vec(
            av.rows,
            bv.cols,
            raw::mm(av.data(), bv.data(), av.rows, av.cols, bv.cols),
        );
        let out = self.check_finite(out, "matmul")?;
        Ok(self.push(Op::MatMul(ai, bi), out))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let av = self.value(ai);
        let mut data = vec![0.0; av.len()];
        for r in 0..av.rows {
            for c in 0..av.cols {
                data[c * av.rows + r] = av.get(r, c);
            }
        }
        let out = Tensor::from_vec(av.cols, av.rows, data);
        Ok(self.push(Op::Transpose(ai), out))
    }

    /// Elementwise addition; a 1×n right operand broadcasts as a row bias over
    /// an m×n left operand.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let same = a.shape() == b.shape();
        let bias = b.rows == 1 && b.cols == a.cols;
        if !same && !bias {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ai, bi) = (self.node_of(a), self.node_of(b));
        let (av, bv) = (self.value(ai), self.value(bi));
        let mut data = av.data().to_vec();
        if av.shape() == bv.shape() {
            for (x, y) in data.iter_mut().zip(bv.data()) {
                *x += y;
            }
        } else {
            for r in 0..av.rows {
                for c in 0..av.cols {
                    data[r * av.cols + c] += bv.data()[c];
                }
            }
        }
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let out = self.check_finite(out, "add")?;
        Ok(self.push(Op::Add(ai, bi), out))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ai, bi) = (self.node_of(a), self.node_of(b));
        let (av, bv) = (self.value(ai), self.value(bi));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let out = self.check_finite(out, "mul")?;
        Ok(self.push(Op::Mul(ai, bi), out))
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let av = self.value(ai);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let out = self.check_finite(out, "scale")?;
        Ok(self.push(Op::Scale(ai, c), out))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let av = self.value(ai);
        let data = av.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        Ok(self.push(Op::Sigmoid(ai), out))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let av = self.value(ai);
        let data = av.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        Ok(self.push(Op::Tanh(ai), out))
    }

    pub fn activation(&mut self, a: &Tensor, kind: Activation) -> Result<Tensor, TensorError> {
        match kind {
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    /// Per-row softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let av = self.value(ai);
        let mut data = vec![0.0; av.len()];
        for r in 0..av.rows {
            let row = av.row_slice(r);
            let out = &mut data[r * av.cols..(r + 1) * av.cols];
            raw::softmax_row(row, out);
        }
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let out = self.check_finite(out, "softmax_rows")?;
        Ok(self.push(Op::SoftmaxRows(ai), out))
    }

    /// Mean over rows of −Σⱼ targetⱼ·ln(max(probsⱼ, 1e-12)). The target is a
    /// constant; no gradient flows into it.
    pub fn cross_entropy(&mut self, probs: &Tensor, target: &Tensor) -> Result<Tensor, TensorError> {
        if probs.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: probs.shape(),
                rhs: target.shape(),
            });
        }
        let pi = self.node_of(probs);
        let pv = self.value(pi);
        let loss = raw::cross_entropy(pv.data(), target.data(), pv.rows, pv.cols);
        let out = self.check_finite(Tensor::scalar(loss), "cross_entropy")?;
        Ok(self.push(Op::CrossEntropy(pi, target.detached()), out))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ai = self.node_of(a);
        let total: f64 = self.value(ai).data().iter().sum();
        let out = self.check_finite(Tensor::scalar(total), "sum")?;
        Ok(self.push(Op::Sum(ai), out))
    }

    /// Concatenate along columns; operands must have the same row count.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rows != b.rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (ai, bi) = (self.node_of(a), self.node_of(b));
        let (av, bv) = (self.value(ai), self.value(bi));
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let out = Tensor::from_vec(av.rows, cols, data);
        Ok(self.push(Op::ConcatCols(ai, bi), out))
    }

    /// Gather rows by index (embedding lookup). Backward scatter-adds, so a
    /// row selected twice accumulates both gradients.
    pub fn select_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        if indices.is_empty() {
            return Err(TensorError::EmptySelection);
        }
        let ai = self.node_of(a);
        let av = self.value(ai);
        for &i in indices {
            if i >= av.rows {
                return Err(TensorError::RowOutOfBounds {
                    index: i,
                    rows: av.rows,
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices {
            data.extend_from_slice(av.row_slice(i));
        }
        let out = Tensor::from_vec(indices.len(), av.cols, data);
        Ok(self.push(Op::SelectRows(ai, indices.to_vec()), out))
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// receives a gradient of its own shape; leaves accumulate by summation
    /// when they fan out.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients, TensorError> {
        if !root.is_scalar() {
            return Err(TensorError::NonScalarRoot(root.shape()));
        }
        let root_idx = match root.node {
            Some(NodeRef { tape, idx }) if tape == self.id => idx,
            _ => return Err(TensorError::NonScalarRoot(root.shape())),
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root_idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=root_idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(ai, bi) => {
                    let (av, bv) = (&self.nodes[*ai].value, &self.nodes[*bi].value);
                    let da = raw::mm_nt(g.data(), bv.data(), av.rows, av.cols, bv.cols);
                    let db = raw::mm_tn(av.data(), g.data(), av.rows, av.cols, bv.cols);
                    accumulate(&mut grads[*ai], av.shape(), &da);
                    accumulate(&mut grads[*bi], bv.shape(), &db);
                }
                Op::Transpose(ai) => {
                    let av = &self.nodes[*ai].value;
                    let mut da = vec![0.0; av.len()];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da[c * g.rows + r] = g.get(r, c);
                        }
                    }
                    accumulate(&mut grads[*ai], av.shape(), &da);
                }
                Op::Add(ai, bi) => {
                    let (ashape, bshape) =
                        (self.nodes[*ai].value.shape(), self.nodes[*bi].value.shape());
                    accumulate(&mut grads[*ai], ashape, g.data());
                    if ashape == bshape {
                        accumulate(&mut grads[*bi], bshape, g.data());
                    } else {
                        // row bias: sum the upstream gradient over rows
                        let mut db = vec![0.0; bshape.1];
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                db[c] += g.get(r, c);
                            }
                        }
                        accumulate(&mut grads[*bi], bshape, &db);
                    }
                }
                Op::Mul(ai, bi) => {
                    let (av, bv) = (&self.nodes[*ai].value, &self.nodes[*bi].value);
                    let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads[*ai], av.shape(), &da);
                    accumulate(&mut grads[*bi], bv.shape(), &db);
                }
                Op::Scale(ai, c) => {
                    let da: Vec<f64> = g.data().iter().map(|g| g * c).collect();
                    accumulate(&mut grads[*ai], self.nodes[*ai].value.shape(), &da);
                }
                Op::Sigmoid(ai) => {
                    let y = &node.value;
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[*ai], y.shape(), &da);
                }
                Op::Tanh(ai) => {
                    let y = &node.value;
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[*ai], y.shape(), &da);
                }
                Op::SoftmaxRows(ai) => {
                    let y = &node.value;
                    let mut da = vec![0.0; y.len()];
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..y.cols {
                            da[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[*ai], y.shape(), &da);
                }
                Op::CrossEntropy(pi, target) => {
                    let pv = &self.nodes[*pi].value;
                    let scale = g.item() / pv.rows as f64;
                    let da: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| if p > LOG_CLAMP { -scale * t / p } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*pi], pv.shape(), &da);
                }
                Op::Sum(ai) => {
                    let av = &self.nodes[*ai].value;
                    let da = vec![g.item(); av.len()];
                    accumulate(&mut grads[*ai], av.shape(), &da);
                }
                Op::ConcatCols(ai, bi) => {
                    let (av, bv) = (&self.nodes[*ai].value, &self.nodes[*bi].value);
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..g.rows {
                        let gr = g.row_slice(r);
                        da[r * av.cols..(r + 1) * av.cols].copy_from_slice(&gr[..av.cols]);
                        db[r * bv.cols..(r + 1) * bv.cols].copy_from_slice(&gr[av.cols..]);
                    }
                    accumulate(&mut grads[*ai], av.shape(), &da);
                    accumulate(&mut grads[*bi], bv.shape(), &db);
                }
                Op::SelectRows(ai, indices) => {
                    let av = &self.nodes[*ai].value;
                    let mut da = vec![0.0; av.len()];
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..av.cols {
                            da[src_r * av.cols + c] += g.get(out_r, c);
                        }
                    }
                    accumulate(&mut grads[*ai], av.shape(), &da);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: (usize, usize), add: &[f64]) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    for (x, y) in t.data_mut().iter_mut().zip(add) {
        *x += y;
    }
}

/// Gradient mapping produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, if `t` belongs to
    /// the swept tape and was reachable from the root.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        match t.node {
            Some(NodeRef { tape, idx }) if tape == self.tape => {
                self.grads.get(idx).and_then(|g| g.as_ref())
            }
            _ => None,
        }
    }
}

/// Central finite differences (f(θ+h·e) − f(θ−h·e)) / 2h over every coordinate
/// of every tensor in `params`. The oracle for gradient checks; records nothing.
pub fn finite_diff_gradient<F>(mut f: F, params: &mut [Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].rows(), params[pi].cols());
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            params[pi].data_mut()[i] = orig + h;
            let up = f(params);
            params[pi].data_mut()[i] = orig - h;
            let down = f(params);
            params[pi].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with a small absolute floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

pub(crate) mod raw {
    //! Tape-free kernels shared by forward and backward passes.

    use super::LOG_CLAMP;

    /// C[m,n] = A[m,k] · B[k,n], row-major.
    pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        c
    }

    /// C[m,k] = A[m,n] · B[k,n]ᵀ.
    pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * k];
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = 0.0;
                for j in 0..n {
                    s += arow[j] * brow[j];
                }
                c[i * k + p] = s;
            }
        }
        c
    }

    /// C[k,n] = A[m,k]ᵀ · B[m,n].
    pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        c
    }

    /// Softmax with max subtraction; `out` must be the same length as `row`.
    pub fn softmax_row(row: &[f64], out: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// Mean over rows of −Σⱼ tⱼ·ln(max(pⱼ, clamp)).
    pub fn cross_entropy(probs: &[f64], target: &[f64], rows: usize, cols: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let t = target[r * cols + c];
                if t != 0.0 {
                    total -= t * probs[r * cols + c].max(LOG_CLAMP).ln();
                }
            }
        }
        total / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = tape.matmul(&a, &id).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);

        let mut tape = Tape::new();
        let at = tape.leaf(a.clone()).unwrap();
        let bt = tape.leaf(b.clone()).unwrap();
        let c = tape.matmul(&at, &bt).unwrap();
        let root = tape.sum(&c).unwrap();
        let grads = tape.backward(&root).unwrap();

        let mut params = [a, b];
        let fd = finite_diff_gradient(
            |p| {
                let mut t = Tape::new();
                let c = t.matmul(&p[0], &p[1]).unwrap();
                t.sum(&c).unwrap().item()
            },
            &mut params,
            1e-5,
        );
        for (ad, fd) in [grads.wrt(&at).unwrap(), grads.wrt(&bt).unwrap()]
            .iter()
            .zip(&fd)
        {
            for (x, y) in ad.data().iter().zip(fd.data()) {
                assert!(relative_error(*x, *y) < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sigmoid_and_tanh_fixed_points() {
        let mut tape = Tape::new();
        let x = Tensor::row(vec![0.0, 50.0, -50.0]);
        let s = tape.activation(&x, Activation::Sigmoid).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
        assert!(s.data()[2].abs() < 1e-12);
        assert!(s.is_finite());

        let t = tape.activation(&x, Activation::Tanh).unwrap();
        assert_eq!(t.data()[0], 0.0);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = Tensor::row(vec![0.0, 0.0]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let big = Tensor::row(vec![1000.0, 1000.0, 1000.0]);
        let y = tape.softmax_rows(&big).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = Tensor::row(vec![0.0, 2f64.ln()]);
        let y = tape.softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::new();
        let perfect = tape
            .cross_entropy(&Tensor::row(vec![1.0, 0.0]), &Tensor::row(vec![1.0, 0.0]))
            .unwrap();
        assert!(perfect.item().abs() < 1e-9);

        let uniform = tape
            .cross_entropy(&Tensor::row(vec![0.5, 0.5]), &Tensor::row(vec![1.0, 0.0]))
            .unwrap();
        assert!((uniform.item() - 2f64.ln()).abs() < 1e-12);

        // uniform probabilities make the loss independent of the target
        let smeared = tape
            .cross_entropy(&Tensor::row(vec![0.5, 0.5]), &Tensor::row(vec![0.99, 0.01]))
            .unwrap();
        assert!((smeared.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_square_and_sigmoid() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![0.0, 0.0])).unwrap();
        let s = tape.sigmoid(&x).unwrap();
        let root = tape.sum(&s).unwrap();
        let grads = tape.backward(&root).unwrap();
        for &g in grads.wrt(&x).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let mut params = [Tensor::scalar(3.0)];
        let g = finite_diff_gradient(|p| p[0].item() * p[0].item(), &mut params, 1e-5);
        assert!((g[0].item() - 6.0).abs() < 1e-8);

        let g = finite_diff_gradient(|_| 42.0, &mut params, 1e-5);
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn finite_diff_agrees_with_backward_on_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = rand_tensor(&mut rng, 3, 5);
        let b1 = rand_tensor(&mut rng, 1, 5);
        let w2 = rand_tensor(&mut rng, 5, 2);
        let b2 = rand_tensor(&mut rng, 1, 2);
        let x = rand_tensor(&mut rng, 1, 3);

        let eval = |p: &[Tensor]| {
            let mut t = Tape::new();
            let h = t.matmul(&x, &p[0]).unwrap();
            let h = t.add(&h, &p[1]).unwrap();
            let h = t.tanh(&h).unwrap();
            let o = t.matmul(&h, &p[2]).unwrap();
            let o = t.add(&o, &p[3]).unwrap();
            let o = t.sigmoid(&o).unwrap();
            t.sum(&o).unwrap().item()
        };

        let mut params = [w1, b1, w2, b2];
        let fd = finite_diff_gradient(eval, &mut params, 1e-5);

        let mut tape = Tape::new();
        let staged: Vec<Tensor> = params
            .iter()
            .map(|p| tape.leaf(p.clone()).unwrap())
            .collect();
        let h = tape.matmul(&x, &staged[0]).unwrap();
        let h = tape.add(&h, &staged[1]).unwrap();
        let h = tape.tanh(&h).unwrap();
        let o = tape.matmul(&h, &staged[2]).unwrap();
        let o = tape.add(&o, &staged[3]).unwrap();
        let o = tape.sigmoid(&o).unwrap();
        let root = tape.sum(&o).unwrap();
        let grads = tape.backward(&root).unwrap();

        for (s, fd) in staged.iter().zip(&fd) {
            for (a, b) in grads.wrt(s).unwrap().data().iter().zip(fd.data()) {
                assert!(relative_error(*a, *b) < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences_at_random_points() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 2, 3);
            let b = rand_tensor(&mut rng, 3, 4);
            let c = rand_tensor(&mut rng, 2, 3);
            let idx = vec![rng.gen_range(0..2), 1, 0];

            // composite touching every differentiable op
            let eval = |p: &[Tensor]| {
                let mut t = Tape::new();
                let m = t.matmul(&p[0], &p[1]).unwrap();
                let mt = t.transpose(&m).unwrap(); // 4x2
                let mm = t.matmul(&p[1], &mt).unwrap(); // 3x2... shapes: (3x4)·(4x2)=3x2
                let s = t.sigmoid(&mm).unwrap();
                let th = t.tanh(&p[2]).unwrap();
                let sel = t.select_rows(&th, &idx).unwrap(); // 3x3
                let cat = t.concat_cols(&s, &sel).unwrap(); // 3x5
                let sm = t.softmax_rows(&cat).unwrap();
                let target = Tensor::from_vec(3, 5, vec![0.2; 15]);
                let ce = t.cross_entropy(&sm, &target).unwrap();
                let mul = t.mul(&p[0], &p[2]).unwrap();
                let msum = t.sum(&mul).unwrap();
                let scaled = t.scale(&msum, 0.3).unwrap();
                let tot = t.add(&ce, &scaled).unwrap();
                t.sum(&tot).unwrap()
            };

            let mut params = [a, b, c];
            let fd = finite_diff_gradient(|p| eval(p).item(), &mut params, 1e-5);

            let mut tape = Tape::new();
            let staged: Vec<Tensor> = params
                .iter()
                .map(|p| tape.leaf(p.clone()).unwrap())
                .collect();
            let m = tape.matmul(&staged[0], &staged[1]).unwrap();
            let mt = tape.transpose(&m).unwrap();
            let mm = tape.matmul(&staged[1], &mt).unwrap();
            let s = tape.sigmoid(&mm).unwrap();
            let th = tape.tanh(&staged[2]).unwrap();
            let sel = tape.select_rows(&th, &idx).unwrap();
            let cat = tape.concat_cols(&s, &sel).unwrap();
            let sm = tape.softmax_rows(&cat).unwrap();
            let target = Tensor::from_vec(3, 5, vec![0.2; 15]);
            let ce = tape.cross_entropy(&sm, &target).unwrap();
            let mul = tape.mul(&staged[0], &staged[2]).unwrap();
            let msum = tape.sum(&mul).unwrap();
            let scaled = tape.scale(&msum, 0.3).unwrap();
            let tot = tape.add(&ce, &scaled).unwrap();
            let root = tape.sum(&tot).unwrap();
            let grads = tape.backward(&root).unwrap();

            for (st, fd) in staged.iter().zip(&fd) {
                for (x, y) in grads.wrt(st).unwrap().data().iter().zip(fd.data()) {
                    assert!(
                        relative_error(*x, *y) < 1e-4,
                        "seed {seed}: autodiff {x} vs fd {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0)).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let y = tape.add(&sq, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 9.0);
    }

    #[test]
    fn repeated_row_selection_accumulates() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let sel = tape.select_rows(&table, &[0, 0, 1]).unwrap();
        let root = tape.sum(&sel).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.wrt(&table).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let big = Tensor::row(vec![1e308, 1e308]);
        let err = tape.add(&big, &big).unwrap_err();
        assert!(matches!(err, TensorError::NumericOverflow { .. }));
    }

    #[test]
    fn tape_reuse_of_foreign_tensor_is_a_constant() {
        let mut t1 = Tape::new();
        let x = t1.leaf(Tensor::scalar(2.0)).unwrap();
        let y = t1.mul(&x, &x).unwrap();

        // y carries a node handle from t1; on t2 it must act as a constant leaf
        let mut t2 = Tape::new();
        let z = t2.mul(&y, &y).unwrap();
        assert_eq!(z.item(), 16.0);
        let root = t2.sum(&z).unwrap();
        let grads = t2.backward(&root).unwrap();
        assert!(grads.wrt(&y).is_none());
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = rand_tensor(&mut rng, 4, 4);
            let b = rand_tensor(&mut rng, 4, 4);
            let mut t = Tape::new();
            let m = t.matmul(&a, &b).unwrap();
            let s = t.softmax_rows(&m).unwrap();
            let sum = t.sum(&s).unwrap();
            sum.item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
