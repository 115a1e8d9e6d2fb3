//! Reverse-mode differentiation over a flat tape.
//!
//! Each forward operation appends a node holding its result; `backward`
//! walks the tape in reverse insertion order and accumulates gradients into
//! a per-node buffer. Insertion order is the topological order, so the
//! accumulation order is fixed and runs are bit-for-bit reproducible.
//!
//! The op set is exactly what the trajectory model needs; this is not a
//! general-purpose autodiff.

use crate::error::{Error, Result};
use crate::nn::tensor::{add_assign, matmul, matmul_transa, matmul_transb, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[m,k] @ [k,n]`
    MatMul(NodeId, NodeId),
    /// `[m,k] @ [n,k]^T`
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m,n] + [n]` (bias row broadcast over rows)
    AddRowBroadcast(NodeId, NodeId),
    /// `[m,n] * [n]` (per-feature gain broadcast over rows)
    MulRowBroadcast(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(NodeId),
    /// Row-wise normalization to zero mean / unit variance (biased), no affine.
    LayerNormRows(NodeId, f64),
    /// Columns `[from, to)` of a `[m,n]` input.
    SliceCols(NodeId, usize, usize),
    /// Row `r` of a `[m,n]` input, as `[1,n]`.
    Row(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Rows of `[n,d]` written to `positions[i]` of a zero output.
    ScatterRows { src: NodeId, positions: Vec<usize> },
    Reshape(NodeId),
    /// Σ x²  → scalar `[1]`.
    SumSquares(NodeId),
    /// Sum of scalar `[1]` nodes → scalar `[1]`.
    AddScalars(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_transb(self.value(a), self.value(b));
        self.push(Op::MatMulTransB(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut v = va.clone();
        add_assign(&mut v, vb);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut v = va.clone();
        for (d, s) in v.data_mut().iter_mut().zip(vb.data().iter()) {
            *d -= s;
        }
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul_elem shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut v = va.clone();
        for (d, s) in v.data_mut().iter_mut().zip(vb.data().iter()) {
            *d *= s;
        }
        self.push(Op::MulElem(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for d in v.data_mut() {
            *d *= k;
        }
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (self.value(m), self.value(row));
        assert_eq!(vm.cols(), vr.len(), "add_row_broadcast width");
        let mut v = vm.clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for c in 0..cols {
                v.data_mut()[r * cols + c] += vr.data()[c];
            }
        }
        self.push(Op::AddRowBroadcast(m, row), v)
    }

    pub fn mul_row_broadcast(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (self.value(m), self.value(row));
        assert_eq!(vm.cols(), vr.len(), "mul_row_broadcast width");
        let mut v = vm.clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for c in 0..cols {
                v.data_mut()[r * cols + c] *= vr.data()[c];
            }
        }
        self.push(Op::MulRowBroadcast(m, row), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for d in v.data_mut() {
            *d = 1.0 / (1.0 + (-*d).exp());
        }
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for d in v.data_mut() {
            *d = d.tanh();
        }
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for d in v.data_mut() {
            if *d < 0.0 {
                *d = 0.0;
            }
        }
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for d in v.data_mut() {
            if *d < 0.0 {
                *d *= slope;
            }
        }
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut v = va.clone();
        for r in 0..rows {
            let row = &mut v.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("softmax scores".into()));
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut v = va.clone();
        for r in 0..rows {
            let row = &mut v.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a, eps), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(from < to && to <= cols, "slice_cols {from}..{to} of {cols}");
        let w = to - from;
        let mut v = Tensor::zeros(&[rows, w]);
        for r in 0..rows {
            let src = &va.data()[r * cols + from..r * cols + to];
            v.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
        }
        self.push(Op::SliceCols(a, from, to), v)
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> NodeId {
        let va = self.value(a);
        let cols = va.cols();
        assert!(r < va.rows(), "row {r} of {}", va.rows());
        let v = Tensor::from_vec(&[1, cols], va.row(r).to_vec()).expect("row slice");
        self.push(Op::Row(a, r), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row count");
            let w = vp.cols();
            for r in 0..rows {
                let dst_start = r * total + off;
                v.data_mut()[dst_start..dst_start + w].copy_from_slice(vp.row(r));
            }
            off += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Tensor::zeros(&[total, cols]);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col count");
            let n = vp.len();
            v.data_mut()[off..off + n].copy_from_slice(vp.data());
            off += n;
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    /// Scatter rows of `src` (`[n,d]`) into a zero `[rows,d]` tensor at the
    /// given row positions. Positions must be distinct and in range.
    pub fn scatter_rows(&mut self, src: NodeId, positions: &[usize], rows: usize) -> Result<NodeId> {
        let vs = self.value(src);
        if vs.rows() != positions.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} source rows", positions.len()),
                format!("{}", vs.rows()),
            ));
        }
        let d = vs.cols();
        let mut v = Tensor::zeros(&[rows, d]);
        let mut seen = vec![false; rows];
        for (i, &p) in positions.iter().enumerate() {
            if p >= rows || seen[p] {
                return Err(Error::MaskIntegrity(format!("scatter position {p} duplicate or out of range")));
            }
            seen[p] = true;
            v.data_mut()[p * d..(p + 1) * d].copy_from_slice(vs.row(i));
        }
        Ok(self.push(
            Op::ScatterRows {
                src,
                positions: positions.to_vec(),
            },
            v,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).reshaped(shape).expect("reshape size");
        self.push(Op::Reshape(a), v)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    pub fn add_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut s = 0.0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.len(), 1, "add_scalars on non-scalar");
            s += vp.data()[0];
        }
        self.push(Op::AddScalars(parts.to_vec()), Tensor::scalar(s))
    }

    /// Gradients of the scalar at `loss` with respect to every node.
    /// Nodes the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Vec<Tensor> {
        assert_eq!(self.value(loss).len(), 1, "backward seed must be scalar");
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_transb(&g, self.value(*b));
                    let db = matmul_transa(self.value(*a), &g);
                    add_assign(&mut grads[a.0], &da);
                    add_assign(&mut grads[b.0], &db);
                }
                Op::MatMulTransB(a, b) => {
                    // C = A B^T:  dA = dC B,  dB = dC^T A
                    let da = matmul(&g, self.value(*b));
                    let db = matmul_transa(&g, self.value(*a));
                    add_assign(&mut grads[a.0], &da);
                    add_assign(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    add_assign(&mut grads[a.0], &g);
                    add_assign(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_assign(&mut grads[a.0], &g);
                    for (d, s) in grads[b.0].data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
                Op::MulElem(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    for ((d, s), x) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += s * x;
                    }
                    for ((d, s), x) in grads[b.0].data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += s * x;
                    }
                }
                Op::Scale(a, k) => {
                    for (d, s) in grads[a.0].data_mut().iter_mut().zip(g.data()) {
                        *d += s * k;
                    }
                }
                Op::AddRowBroadcast(m, row) => {
                    add_assign(&mut grads[m.0], &g);
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            grads[row.0].data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                }
                Op::MulRowBroadcast(m, row) => {
                    let (vm, vr) = (self.value(*m).clone(), self.value(*row).clone());
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let gv = g.data()[r * cols + c];
                            grads[m.0].data_mut()[r * cols + c] += gv * vr.data()[c];
                            grads[row.0].data_mut()[c] += gv * vm.data()[r * cols + c];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = grads[a.0].data_mut();
                    for i in 0..y.len() {
                        let yv = y.data()[i];
                        ga[i] += g.data()[i] * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = grads[a.0].data_mut();
                    for i in 0..y.len() {
                        let yv = y.data()[i];
                        ga[i] += g.data()[i] * (1.0 - yv * yv);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = grads[a.0].data_mut();
                    for i in 0..x.len() {
                        if x.data()[i] > 0.0 {
                            ga[i] += g.data()[i];
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let ga = grads[a.0].data_mut();
                    for i in 0..x.len() {
                        let k = if x.data()[i] > 0.0 { 1.0 } else { *slope };
                        ga[i] += g.data()[i] * k;
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dx_i = y_i (g_i − Σ_j g_j y_j), per row
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let ga = grads[a.0].data_mut();
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNormRows(a, eps) => {
                    // dx = inv (g − mean(g) − x̂ mean(g ⊙ x̂)), biased variance
                    let x = self.value(*a);
                    let xhat = &self.nodes[idx].value;
                    let (rows, cols) = (x.rows(), x.cols());
                    let nf = cols as f64;
                    let ga = grads[a.0].data_mut();
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let hr = &xhat.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / nf;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / nf;
                        let ghmean = gr.iter().zip(hr).map(|(gv, hv)| gv * hv).sum::<f64>() / nf;
                        for c in 0..cols {
                            ga[r * cols + c] += inv * (gr[c] - gmean - hr[c] * ghmean);
                        }
                    }
                }
                Op::SliceCols(a, from, _to) => {
                    let cols_in = self.value(*a).cols();
                    let w = g.cols();
                    let ga = grads[a.0].data_mut();
                    for r in 0..g.rows() {
                        for c in 0..w {
                            ga[r * cols_in + from + c] += g.data()[r * w + c];
                        }
                    }
                }
                Op::Row(a, r) => {
                    let cols = g.cols();
                    let ga = grads[a.0].data_mut();
                    for c in 0..cols {
                        ga[r * cols + c] += g.data()[c];
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        for r in 0..rows {
                            for c in 0..w {
                                grads[p.0].data_mut()[r * w + c] += g.data()[r * total + off + c];
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        for i in 0..n {
                            grads[p.0].data_mut()[i] += g.data()[off + i];
                        }
                        off += n;
                    }
                }
                Op::ScatterRows { src, positions, .. } => {
                    let d = g.cols();
                    for (i, &p) in positions.iter().enumerate() {
                        for c in 0..d {
                            grads[src.0].data_mut()[i * d + c] += g.data()[p * d + c];
                        }
                    }
                }
                Op::Reshape(a) => {
                    for (d, s) in grads[a.0].data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::SumSquares(a) => {
                    let x = self.value(*a).clone();
                    let gv = g.data()[0];
                    for (d, xv) in grads[a.0].data_mut().iter_mut().zip(x.data()) {
                        *d += 2.0 * gv * xv;
                    }
                }
                Op::AddScalars(parts) => {
                    let gv = g.data()[0];
                    for &p in parts {
                        grads[p.0].data_mut()[0] += gv;
                    }
                }
            }
        }
        grads
    }
}
