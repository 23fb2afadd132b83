//! Reverse-mode automatic differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] is a single-use arena: forward calls append nodes, `backward`
//! walks them in reverse. Parents always precede children, so one reverse
//! sweep with gradient accumulation is sufficient. The vocabulary covers
//! exactly the operations this model family needs; there is no general-user
//! tape.

use super::tensor::Tensor;
use super::{gelu_grad_scalar, gelu_scalar, row_stats, softmax};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// [T,d] + [d], broadcast over rows.
    AddRowVec(VarId, VarId),
    /// [T,d] * [d], broadcast over rows.
    MulRowVec(VarId, VarId),
    Matmul(VarId, VarId),
    /// A [m,k] x B[n,k]^T -> [m,n].
    MatmulNT(VarId, VarId),
    Gelu(VarId),
    SoftmaxRows(VarId),
    /// Per-row standardization to mean 0, variance 1 (no affine part).
    LayerNormRows(VarId),
    /// Per-row L2 normalization.
    NormalizeRows(VarId),
    /// p*ln(p) elementwise with 0*ln(0) = 0.
    XLogX(VarId),
    MeanRows(VarId),
    MeanAll(VarId),
    SumAll(VarId),
    Reshape(VarId),
    GatherRows(VarId, Vec<usize>),
    /// Gather scalar entries of a 2-d tensor into an [M, C] matrix.
    GatherPairs {
        src: VarId,
        pairs: Vec<(usize, usize)>,
    },
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    SliceCols {
        src: VarId,
        start: usize,
        len: usize,
    },
    /// Rows where `mask` is true are replaced by the embedding vector.
    MaskRows {
        src: VarId,
        embed: VarId,
        mask: Vec<bool>,
    },
    /// Mean over rows of -log softmax(logits)[target].
    CrossEntropyRows(VarId, Vec<usize>),
    /// Valid (unpadded) strided 1-d convolution over [T, c_in].
    ConvValid {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
    },
    /// Same-length grouped convolution, stride 1, total padding k-1.
    ConvSamePad {
        x: VarId,
        w: VarId,
        b: VarId,
        groups: usize,
    },
    /// Forward emits the one-hot rows, backward passes gradients straight
    /// through to the soft distribution.
    StraightThrough(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward pass, indexed by `VarId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape when the leaf never
    /// influenced the loss.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Insert a tensor as a leaf. Leaves are both trainable parameters and
    /// constants; only the caller distinguishes them by keeping the id.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a].value.map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_row_vec(&mut self, x: VarId, v: VarId) -> VarId {
        let xv = &self.nodes[x].value;
        let vv = &self.nodes[v].value;
        let cols = xv.cols();
        debug_assert_eq!(vv.len(), cols);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += vv.data()[c];
            }
        }
        self.push(Op::AddRowVec(x, v), out)
    }

    pub fn mul_row_vec(&mut self, x: VarId, v: VarId) -> VarId {
        let xv = &self.nodes[x].value;
        let vv = &self.nodes[v].value;
        let cols = xv.cols();
        debug_assert_eq!(vv.len(), cols);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for c in 0..cols {
                out.data_mut()[r * cols + c] *= vv.data()[c];
            }
        }
        self.push(Op::MulRowVec(x, v), out)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::Matmul(a, b), value)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(Op::MatmulNT(a, b), value)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(gelu_scalar);
        self.push(Op::Gelu(a), value)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let value = softmax(&self.nodes[a].value, 1);
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn layer_norm_rows(&mut self, a: VarId) -> VarId {
        let xv = &self.nodes[a].value;
        let cols = xv.cols();
        let mut out = Tensor::zeros(vec![xv.rows(), cols]);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, inv_std) = row_stats(row);
            for c in 0..cols {
                out.data_mut()[r * cols + c] = (row[c] - mean) * inv_std;
            }
        }
        self.push(Op::LayerNormRows(a), out)
    }

    pub fn normalize_rows(&mut self, a: VarId) -> VarId {
        let xv = &self.nodes[a].value;
        let cols = xv.cols();
        let mut out = Tensor::zeros(vec![xv.rows(), cols]);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let norm = l2_norm(row);
            for c in 0..cols {
                out.data_mut()[r * cols + c] = row[c] / norm;
            }
        }
        self.push(Op::NormalizeRows(a), out)
    }

    pub fn xlogx(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(|p| if p == 0.0 { 0.0 } else { p * p.ln() });
        self.push(Op::XLogX(a), value)
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let xv = &self.nodes[a].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(vec![1, cols]);
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[c] += xv.at(r, c);
            }
        }
        for v in out.data_mut() {
            *v /= rows as f64;
        }
        self.push(Op::MeanRows(a), out)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let xv = &self.nodes[a].value;
        let mean = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(mean))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let sum = self.nodes[a].value.data().iter().sum::<f64>();
        self.push(Op::SumAll(a), Tensor::scalar(sum))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let xv = &self.nodes[a].value;
        debug_assert_eq!(shape.iter().product::<usize>(), xv.len());
        let value = Tensor::new(shape, xv.data().to_vec()).expect("reshape size checked");
        self.push(Op::Reshape(a), value)
    }

    pub fn gather_rows(&mut self, a: VarId, indices: &[usize]) -> VarId {
        let xv = &self.nodes[a].value;
        let cols = xv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::matrix(indices.len(), cols, data).expect("gather_rows shape");
        self.push(Op::GatherRows(a, indices.to_vec()), value)
    }

    /// Gather entries `src[r, c]` for each `(r, c)` pair into a row-major
    /// [pairs.len()/cols, cols] matrix.
    pub fn gather_pairs(&mut self, src: VarId, pairs: Vec<(usize, usize)>, cols: usize) -> VarId {
        let xv = &self.nodes[src].value;
        debug_assert_eq!(pairs.len() % cols, 0);
        let data: Vec<f64> = pairs.iter().map(|&(r, c)| xv.at(r, c)).collect();
        let value = Tensor::matrix(pairs.len() / cols, cols, data).expect("gather_pairs shape");
        self.push(Op::GatherPairs { src, pairs }, value)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let cols = self.nodes[parts[0]].value.cols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            debug_assert_eq!(self.nodes[p].value.cols(), cols);
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let value = Tensor::matrix(rows, cols, data).expect("concat_rows shape");
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            debug_assert_eq!(pv.rows(), rows);
            let w = pv.cols();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + w]
                    .copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, src: VarId, start: usize, len: usize) -> VarId {
        let xv = &self.nodes[src].value;
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data).expect("slice_cols shape");
        self.push(Op::SliceCols { src, start, len }, value)
    }

    pub fn mask_rows(&mut self, src: VarId, embed: VarId, mask: &[bool]) -> VarId {
        let xv = &self.nodes[src].value;
        let ev = &self.nodes[embed].value;
        let cols = xv.cols();
        debug_assert_eq!(ev.len(), cols);
        debug_assert_eq!(mask.len(), xv.rows());
        let mut out = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(ev.data());
            }
        }
        self.push(
            Op::MaskRows {
                src,
                embed,
                mask: mask.to_vec(),
            },
            out,
        )
    }

    /// Mean over rows of the softmax cross-entropy against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: VarId, targets: &[usize]) -> VarId {
        let lv = &self.nodes[logits].value;
        debug_assert_eq!(targets.len(), lv.rows());
        let probs = softmax(lv, 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs.at(r, t).ln();
        }
        loss /= targets.len() as f64;
        self.push(
            Op::CrossEntropyRows(logits, targets.to_vec()),
            Tensor::scalar(loss),
        )
    }

    /// Valid strided convolution: x [T, c_in], w [c_out, c_in, k], b [c_out]
    /// -> [(T-k)/stride + 1, c_out]. The caller guarantees T >= k.
    pub fn conv_valid(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> VarId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let value = conv_valid_forward(xv, wv, bv, stride);
        self.push(Op::ConvValid { x, w, b, stride }, value)
    }

    /// Same-length grouped convolution: x [T, d], w [d, d/groups, k], b [d]
    /// -> [T, d], stride 1, total zero padding k-1 (floor((k-1)/2) left).
    pub fn conv_same_pad(&mut self, x: VarId, w: VarId, b: VarId, groups: usize) -> VarId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let value = conv_same_forward(xv, wv, bv, groups);
        self.push(Op::ConvSamePad { x, w, b, groups }, value)
    }

    /// Hard selection with a straight-through backward: the value is the
    /// one-hot encoding of `hard`, the gradient flows to `soft` unchanged.
    pub fn straight_through(&mut self, soft: VarId, hard: Vec<usize>) -> VarId {
        let sv = &self.nodes[soft].value;
        let (rows, cols) = (sv.rows(), sv.cols());
        debug_assert_eq!(hard.len(), rows);
        let mut out = Tensor::zeros(vec![rows, cols]);
        for (r, &h) in hard.iter().enumerate() {
            out.data_mut()[r * cols + h] = 1.0;
        }
        self.push(Op::StraightThrough(soft), out)
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, *a, self.shape(*a), |d| d.axpy(1.0, g));
                add_grad(grads, *b, self.shape(*b), |d| d.axpy(1.0, g));
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, self.shape(*a), |d| d.axpy(1.0, g));
                add_grad(grads, *b, self.shape(*b), |d| d.axpy(-1.0, g));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_grad(grads, *a, self.shape(*a), |d| {
                    for i in 0..d.len() {
                        d.data_mut()[i] += g.data()[i] * bv.data()[i];
                    }
                });
                add_grad(grads, *b, self.shape(*b), |d| {
                    for i in 0..d.len() {
                        d.data_mut()[i] += g.data()[i] * av.data()[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                add_grad(grads, *a, self.shape(*a), |d| d.axpy(*c, g));
            }
            Op::AddRowVec(x, v) => {
                add_grad(grads, *x, self.shape(*x), |d| d.axpy(1.0, g));
                let cols = self.nodes[*v].value.len();
                add_grad(grads, *v, self.shape(*v), |d| {
                    for (i, gv) in g.data().iter().enumerate() {
                        d.data_mut()[i % cols] += gv;
                    }
                });
            }
            Op::MulRowVec(x, v) => {
                let xv = &self.nodes[*x].value;
                let vv = &self.nodes[*v].value;
                let cols = vv.len();
                add_grad(grads, *x, self.shape(*x), |d| {
                    for (i, gv) in g.data().iter().enumerate() {
                        d.data_mut()[i] += gv * vv.data()[i % cols];
                    }
                });
                add_grad(grads, *v, self.shape(*v), |d| {
                    for (i, gv) in g.data().iter().enumerate() {
                        d.data_mut()[i % cols] += gv * xv.data()[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = g.matmul_nt(bv);
                let db = av.matmul_tn(g);
                add_grad(grads, *a, self.shape(*a), |d| d.axpy(1.0, &da));
                add_grad(grads, *b, self.shape(*b), |d| d.axpy(1.0, &db));
            }
            Op::MatmulNT(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = g.matmul(bv);
                let db = g.matmul_tn(av);
                add_grad(grads, *a, self.shape(*a), |d| d.axpy(1.0, &da));
                add_grad(grads, *b, self.shape(*b), |d| d.axpy(1.0, &db));
            }
            Op::Gelu(a) => {
                let av = &self.nodes[*a].value;
                add_grad(grads, *a, self.shape(*a), |d| {
                    for i in 0..d.len() {
                        d.data_mut()[i] += g.data()[i] * gelu_grad_scalar(av.data()[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (rows, cols) = (y.rows(), y.cols());
                add_grad(grads, *a, self.shape(*a), |d| {
                    for r in 0..rows {
                        let yrow = y.row(r);
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            d.data_mut()[r * cols + c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let xv = &self.nodes[*a].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                add_grad(grads, *a, self.shape(*a), |d| {
                    for r in 0..rows {
                        let row = xv.row(r);
                        let (mean, inv_std) = row_stats(row);
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let gmean: f64 = grow.iter().sum::<f64>() / cols as f64;
                        let mut gxhat = 0.0;
                        for c in 0..cols {
                            gxhat += grow[c] * (row[c] - mean) * inv_std;
                        }
                        gxhat /= cols as f64;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv_std;
                            d.data_mut()[r * cols + c] +=
                                inv_std * (grow[c] - gmean - xhat * gxhat);
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let xv = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                add_grad(grads, *a, self.shape(*a), |d| {
                    for r in 0..rows {
                        let norm = l2_norm(xv.row(r));
                        let yrow = y.row(r);
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            d.data_mut()[r * cols + c] += (grow[c] - yrow[c] * dot) / norm;
                        }
                    }
                });
            }
            Op::XLogX(a) => {
                let av = &self.nodes[*a].value;
                add_grad(grads, *a, self.shape(*a), |d| {
                    for i in 0..d.len() {
                        let p = av.data()[i];
                        if p != 0.0 {
                            d.data_mut()[i] += g.data()[i] * (p.ln() + 1.0);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[*a].value.rows();
                let cols = self.nodes[*a].value.cols();
                let inv = 1.0 / rows as f64;
                add_grad(grads, *a, self.shape(*a), |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d.data_mut()[r * cols + c] += g.data()[c] * inv;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let inv = 1.0 / self.nodes[*a].value.len() as f64;
                let gv = g.item() * inv;
                add_grad(grads, *a, self.shape(*a), |d| {
                    for v in d.data_mut() {
                        *v += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.item();
                add_grad(grads, *a, self.shape(*a), |d| {
                    for v in d.data_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Reshape(a) => {
                add_grad(grads, *a, self.shape(*a), |d| {
                    for i in 0..d.len() {
                        d.data_mut()[i] += g.data()[i];
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = self.nodes[*a].value.cols();
                add_grad(grads, *a, self.shape(*a), |d| {
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            d.data_mut()[src_r * cols + c] += g.data()[out_r * cols + c];
                        }
                    }
                });
            }
            Op::GatherPairs { src, pairs } => {
                let src_cols = self.nodes[*src].value.cols();
                add_grad(grads, *src, self.shape(*src), |d| {
                    for (i, &(r, c)) in pairs.iter().enumerate() {
                        d.data_mut()[r * src_cols + c] += g.data()[i];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    add_grad(grads, p, self.shape(p), |d| {
                        for i in 0..n {
                            d.data_mut()[i] += g.data()[offset + i];
                        }
                    });
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[parts[0]].value.rows();
                let total = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    add_grad(grads, p, self.shape(p), |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d.data_mut()[r * w + c] += g.data()[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start, len } => {
                let rows = self.nodes[*src].value.rows();
                let src_cols = self.nodes[*src].value.cols();
                add_grad(grads, *src, self.shape(*src), |d| {
                    for r in 0..rows {
                        for c in 0..*len {
                            d.data_mut()[r * src_cols + start + c] += g.data()[r * len + c];
                        }
                    }
                });
            }
            Op::MaskRows { src, embed, mask } => {
                let cols = self.nodes[*src].value.cols();
                add_grad(grads, *src, self.shape(*src), |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for c in 0..cols {
                                d.data_mut()[r * cols + c] += g.data()[r * cols + c];
                            }
                        }
                    }
                });
                add_grad(grads, *embed, self.shape(*embed), |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..cols {
                                d.data_mut()[c] += g.data()[r * cols + c];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyRows(logits, targets) => {
                let lv = &self.nodes[*logits].value;
                let probs = softmax(lv, 1);
                let (rows, cols) = (lv.rows(), lv.cols());
                let scale = g.item() / rows as f64;
                add_grad(grads, *logits, self.shape(*logits), |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let indicator = if targets[r] == c { 1.0 } else { 0.0 };
                            d.data_mut()[r * cols + c] +=
                                scale * (probs.at(r, c) - indicator);
                        }
                    }
                });
            }
            Op::ConvValid { x, w, b, stride } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t_out = self.nodes[id].value.rows();
                add_grad(grads, *x, self.shape(*x), |d| {
                    for t in 0..t_out {
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for dt in 0..k {
                                let xi = t * stride + dt;
                                for i in 0..c_in {
                                    d.data_mut()[xi * c_in + i] +=
                                        gv * wv.data()[(o * c_in + i) * k + dt];
                                }
                            }
                        }
                    }
                });
                add_grad(grads, *w, self.shape(*w), |d| {
                    for t in 0..t_out {
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for dt in 0..k {
                                let xi = t * stride + dt;
                                for i in 0..c_in {
                                    d.data_mut()[(o * c_in + i) * k + dt] +=
                                        gv * xv.data()[xi * c_in + i];
                                }
                            }
                        }
                    }
                });
                add_grad(grads, *b, self.shape(*b), |d| {
                    for t in 0..t_out {
                        for o in 0..c_out {
                            d.data_mut()[o] += g.data()[t * c_out + o];
                        }
                    }
                });
            }
            Op::ConvSamePad { x, w, b, groups } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (d_ch, gsize, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t_len = xv.rows();
                let pad_left = (k - 1) / 2;
                add_grad(grads, *x, self.shape(*x), |d| {
                    for t in 0..t_len {
                        for c in 0..d_ch {
                            let gv = g.data()[t * d_ch + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let group = c / (d_ch / groups);
                            let in_base = group * (d_ch / groups);
                            for dt in 0..k {
                                let xi = t as isize - pad_left as isize + dt as isize;
                                if xi < 0 || xi >= t_len as isize {
                                    continue;
                                }
                                for j in 0..gsize {
                                    d.data_mut()[xi as usize * d_ch + in_base + j] +=
                                        gv * wv.data()[(c * gsize + j) * k + dt];
                                }
                            }
                        }
                    }
                });
                add_grad(grads, *w, self.shape(*w), |d| {
                    for t in 0..t_len {
                        for c in 0..d_ch {
                            let gv = g.data()[t * d_ch + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let group = c / (d_ch / groups);
                            let in_base = group * (d_ch / groups);
                            for dt in 0..k {
                                let xi = t as isize - pad_left as isize + dt as isize;
                                if xi < 0 || xi >= t_len as isize {
                                    continue;
                                }
                                for j in 0..gsize {
                                    d.data_mut()[(c * gsize + j) * k + dt] +=
                                        gv * xv.data()[xi as usize * d_ch + in_base + j];
                                }
                            }
                        }
                    }
                });
                add_grad(grads, *b, self.shape(*b), |d| {
                    for t in 0..t_len {
                        for c in 0..d_ch {
                            d.data_mut()[c] += g.data()[t * d_ch + c];
                        }
                    }
                });
            }
            Op::StraightThrough(soft) => {
                add_grad(grads, *soft, self.shape(*soft), |d| d.axpy(1.0, g));
            }
        }
    }

    fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }
}

fn add_grad(
    grads: &mut [Option<Tensor>],
    id: VarId,
    shape: &[usize],
    accum: impl FnOnce(&mut Tensor),
) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    accum(slot);
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn conv_valid_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_in = x.rows();
    debug_assert_eq!(x.cols(), c_in);
    debug_assert!(t_in >= k, "conv_valid input shorter than kernel");
    let t_out = (t_in - k) / stride + 1;
    let mut out = Tensor::zeros(vec![t_out, c_out]);
    for t in 0..t_out {
        for o in 0..c_out {
            let mut acc = b.data()[o];
            for i in 0..c_in {
                let wrow = &w.data()[(o * c_in + i) * k..(o * c_in + i + 1) * k];
                for (dt, &wv) in wrow.iter().enumerate() {
                    acc += wv * x.data()[(t * stride + dt) * c_in + i];
                }
            }
            out.data_mut()[t * c_out + o] = acc;
        }
    }
    out
}

pub(crate) fn conv_same_forward(x: &Tensor, w: &Tensor, b: &Tensor, groups: usize) -> Tensor {
    let (d_ch, gsize, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_len = x.rows();
    debug_assert_eq!(x.cols(), d_ch);
    debug_assert_eq!(d_ch / groups, gsize);
    let pad_left = (k - 1) / 2;
    let mut out = Tensor::zeros(vec![t_len, d_ch]);
    for t in 0..t_len {
        for c in 0..d_ch {
            let group = c / (d_ch / groups);
            let in_base = group * (d_ch / groups);
            let mut acc = b.data()[c];
            for dt in 0..k {
                let xi = t as isize - pad_left as isize + dt as isize;
                if xi < 0 || xi >= t_len as isize {
                    continue;
                }
                for j in 0..gsize {
                    acc += w.data()[(c * gsize + j) * k + dt]
                        * x.data()[xi as usize * d_ch + in_base + j];
                }
            }
            out.data_mut()[t * d_ch + c] = acc;
        }
    }
    out
}
