//! Reverse-mode differentiation over a tape of dense matrix ops.
//!
//! A [`Graph`] borrows parameter values immutably; [`Graph::backward`]
//! accumulates into a separate [`Grads`] so several graphs (one per sample)
//! can feed the same buffers before an optimizer step.

use super::params::{Grads, ParamId, Params};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    EmbedBag {
        param: ParamId,
        bags: Vec<Vec<usize>>,
        mean: bool,
    },
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    BlockSum(Var, usize),
    RepeatBlocks(Var, usize),
    MeanBlocks(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    RowNorm(Var),
    CrossEntropyRows {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seqs: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The parameter as a graph input. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Rows gathered from a parameter table; each output row is the sum (or
    /// mean) of the listed table rows. An empty bag yields a zero row.
    pub fn embed_bag(&mut self, param: ParamId, bags: Vec<Vec<usize>>, mean: bool) -> Var {
        let table = self.params.get(param);
        let d = table.cols();
        let mut out = Tensor::zeros(bags.len(), d);
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let w = if mean { 1.0 / bag.len() as f64 } else { 1.0 };
            let dst = out.row_mut(r);
            for &i in bag {
                for (o, x) in dst.iter_mut().zip(table.row(i)) {
                    *o += w * x;
                }
            }
        }
        self.push(out, Op::EmbedBag { param, bags, mean }, true)
    }

    pub fn embed(&mut self, param: ParamId, ids: &[usize]) -> Var {
        self.embed_bag(param, ids.iter().map(|&i| vec![i]).collect(), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} · {k2}x{n}");
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt {m}x{k} · ({n}x{k2})ᵀ");
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            out.data_mut(),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols(), "add_row width");
        let mut out = ta.clone();
        let c = ta.cols();
        if c > 0 {
            for r in out.data_mut().chunks_mut(c) {
                for (o, x) in r.iter_mut().zip(tr.data()) {
                    *o += x;
                }
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols(), "mul_row width");
        let mut out = ta.clone();
        let c = ta.cols();
        if c > 0 {
            for r in out.data_mut().chunks_mut(c) {
                for (o, x) in r.iter_mut().zip(tr.data()) {
                    *o *= x;
                }
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|x| f(*x)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| leaky(x, slope), Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::LeakyRelu(a, 0.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        if c > 0 {
            for r in out.data_mut().chunks_mut(c) {
                softmax_in_place(r);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with learned 1×c gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let (n, c) = t.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                o[j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let c = t.cols();
        let out = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Sums row `r` of `a` into output row `idx[r]`; the output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), idx.len());
        let mut out = Tensor::zeros(n, t.cols());
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(i).iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterAddRows(a, idx.to_vec()), ng)
    }

    /// Column-wise softmax among rows that share a segment id.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), segments.len());
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let c = t.cols();
        let mut maxes = vec![f64::NEG_INFINITY; nseg * c];
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let m = &mut maxes[s * c + j];
                *m = m.max(t.get(r, j));
            }
        }
        let mut out = Tensor::zeros(t.rows(), c);
        let mut sums = vec![0.0; nseg * c];
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let e = (t.get(r, j) - maxes[s * c + j]).exp();
                out.row_mut(r)[j] = e;
                sums[s * c + j] += e;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out.row_mut(r)[j] /= sums[s * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentSoftmax(a, segments.to_vec()), ng)
    }

    /// n×(blocks·w) → n×blocks, summing each width-w block.
    pub fn block_sum(&mut self, a: Var, blocks: usize) -> Var {
        let t = self.value(a);
        let (n, c) = t.shape();
        assert_eq!(c % blocks, 0);
        let w = c / blocks;
        let mut out = Tensor::zeros(n, blocks);
        for r in 0..n {
            let row = t.row(r);
            for b in 0..blocks {
                out.row_mut(r)[b] = row[b * w..(b + 1) * w].iter().sum();
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::BlockSum(a, blocks), ng)
    }

    /// n×blocks → n×(blocks·width), repeating each value across its block.
    pub fn repeat_blocks(&mut self, a: Var, width: usize) -> Var {
        let t = self.value(a);
        let (n, blocks) = t.shape();
        let mut out = Tensor::zeros(n, blocks * width);
        for r in 0..n {
            for b in 0..blocks {
                let v = t.get(r, b);
                out.row_mut(r)[b * width..(b + 1) * width].fill(v);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatBlocks(a, width), ng)
    }

    /// n×(blocks·w) → n×w, averaging the blocks.
    pub fn mean_blocks(&mut self, a: Var, blocks: usize) -> Var {
        let t = self.value(a);
        let (n, c) = t.shape();
        assert_eq!(c % blocks, 0);
        let w = c / blocks;
        let inv = 1.0 / blocks as f64;
        let mut out = Tensor::zeros(n, w);
        for r in 0..n {
            let row = t.row(r);
            let o = out.row_mut(r);
            for b in 0..blocks {
                for j in 0..w {
                    o[j] += inv * row[b * w + j];
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanBlocks(a, blocks), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, c) = t.shape();
        let mut out = Tensor::zeros(1, c);
        for r in 0..n {
            for (o, x) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / n.max(1) as f64;
        out.data_mut().iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// n×c → n×1 of row L2 norms.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), targets.len());
        let c = t.cols();
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            assert!(tgt < c, "target {tgt} out of {c} classes");
            loss += log_sum_exp(t.row(r)) - t.get(r, tgt);
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        loss /= targets.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                x,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape changes element count");
        let out = Tensor::from_vec(rows, cols, t.data().to_vec());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Scaled dot-product self-attention applied independently to each
    /// `(start, len)` row block of the stacked `q`, `k`, `v` (N×H), with the
    /// columns split into `heads` equal slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seqs: &[(usize, usize)], heads: usize) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, h) = qt.shape();
        assert_eq!(kt.shape(), (n, h));
        assert_eq!(vt.shape(), (n, h));
        assert_eq!(h % heads, 0, "hidden not divisible by heads");
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, h);
        let mut probs = Vec::with_capacity(seqs.iter().map(|&(_, l)| l * l * heads).sum());
        for &(start, len) in seqs {
            assert!(start + len <= n, "attention block out of range");
            for hd in 0..heads {
                let c0 = hd * dh;
                for i in 0..len {
                    let qi = &qt.row(start + i)[c0..c0 + dh];
                    let base = probs.len();
                    for j in 0..len {
                        let kj = &kt.row(start + j)[c0..c0 + dh];
                        probs.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                    }
                    softmax_in_place(&mut probs[base..]);
                    let o = &mut out.row_mut(start + i)[c0..c0 + dh];
                    for j in 0..len {
                        let p = probs[base + j];
                        for (x, y) in o.iter_mut().zip(&vt.row(start + j)[c0..c0 + dh]) {
                            *x += p * y;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seqs: seqs.to_vec(),
                heads,
                probs,
            },
            ng,
        )
    }

    /// Backpropagates from the scalar `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        if !self.ng(loss) {
            return;
        }
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, dy, &mut g, grads);
        }
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut g[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn acc_tensor(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut g[v.0];
        match slot {
            Some(s) => s.add_assign(&t),
            None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, i: usize, dy: Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        let node = &self.nodes[i];
        let y = match &node.value {
            Value::Owned(t) => t,
            Value::Param(id) => {
                grads.get_mut(*id).add_assign(&dy);
                return;
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::EmbedBag { param, bags, mean } => {
                let table = grads.get_mut(*param);
                for (r, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let w = if *mean { 1.0 / bag.len() as f64 } else { 1.0 };
                    let d = dy.row(r);
                    for &k in bag {
                        for (o, x) in table.row_mut(k).iter_mut().zip(d) {
                            *o += w * x;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(g, *a, |ga| {
                    gemm(m, n, k, dy.data(), false, bv, true, ga.data_mut(), true)
                });
                self.acc(g, *b, |gb| {
                    gemm(k, m, n, av, true, dy.data(), false, gb.data_mut(), true)
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(g, *a, |ga| {
                    gemm(m, n, k, dy.data(), false, bv, false, ga.data_mut(), true)
                });
                self.acc(g, *b, |gb| {
                    gemm(n, m, k, dy.data(), true, av, false, gb.data_mut(), true)
                });
            }
            Op::Add(a, b) => {
                self.acc(g, *a, |ga| ga.add_assign(&dy));
                self.acc(g, *b, |gb| gb.add_assign(&dy));
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, |ga| ga.add_assign(&dy));
                self.acc(g, *b, |gb| {
                    for (o, x) in gb.data_mut().iter_mut().zip(dy.data()) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(g, *a, |ga| {
                    for ((o, d), x) in ga.data_mut().iter_mut().zip(dy.data()).zip(bv) {
                        *o += d * x;
                    }
                });
                self.acc(g, *b, |gb| {
                    for ((o, d), x) in gb.data_mut().iter_mut().zip(dy.data()).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(g, *a, |ga| ga.add_assign(&dy));
                self.acc(g, *row, |gr| {
                    let c = dy.cols();
                    for r in dy.data().chunks(c.max(1)) {
                        for (o, x) in gr.data_mut().iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = dy.cols();
                self.acc(g, *a, |ga| {
                    for (gr, dr) in ga.data_mut().chunks_mut(c).zip(dy.data().chunks(c)) {
                        for ((o, d), w) in gr.iter_mut().zip(dr).zip(rv.data()) {
                            *o += d * w;
                        }
                    }
                });
                self.acc(g, *row, |gr| {
                    for (ar, dr) in av.data().chunks(c).zip(dy.data().chunks(c)) {
                        for ((o, d), x) in gr.data_mut().iter_mut().zip(dr).zip(ar) {
                            *o += d * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(g, *a, |ga| {
                    for (o, d) in ga.data_mut().iter_mut().zip(dy.data()) {
                        *o += s * d;
                    }
                });
            }
            Op::AddScalar(a) => self.acc(g, *a, |ga| ga.add_assign(&dy)),
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                let slope = *slope;
                self.acc(g, *a, |ga| {
                    for ((o, d), x) in ga.data_mut().iter_mut().zip(dy.data()).zip(xv) {
                        *o += if *x >= 0.0 { *d } else { slope * d };
                    }
                });
            }
            Op::Elu(a) => {
                let xv = self.value(*a).data();
                self.acc(g, *a, |ga| {
                    for (((o, d), x), yv) in
                        ga.data_mut().iter_mut().zip(dy.data()).zip(xv).zip(y.data())
                    {
                        *o += if *x > 0.0 { *d } else { d * (yv + 1.0) };
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                self.acc(g, *a, |ga| {
                    for ((o, d), x) in ga.data_mut().iter_mut().zip(dy.data()).zip(xv) {
                        *o += d * gelu_parts(*x).1;
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc(g, *a, |ga| {
                    for ((o, d), yv) in ga.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *o += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                self.acc(g, *a, |ga| {
                    for ((gr, dr), yr) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(dy.data().chunks(c))
                        .zip(y.data().chunks(c))
                    {
                        let s: f64 = dr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for ((o, d), p) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += p * (d - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = y.shape();
                let gv = self.value(*gamma).data();
                self.acc(g, *gamma, |gg| {
                    for r in 0..n {
                        for j in 0..c {
                            gg.data_mut()[j] += dy.get(r, j) * xhat[r * c + j];
                        }
                    }
                });
                self.acc(g, *beta, |gb| {
                    for r in 0..n {
                        for (o, d) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
                self.acc(g, *x, |gx| {
                    let inv_c = 1.0 / c as f64;
                    for r in 0..n {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let dr = dy.row(r);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = dr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let o = gx.row_mut(r);
                        for j in 0..c {
                            let dxh = dr[j] * gv[j];
                            o[j] += rstd[r] * (dxh - inv_c * s1 - inv_c * xh[j] * s2);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    self.acc(g, *p, |gp| {
                        for r in 0..dy.rows() {
                            for (o, d) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + w]) {
                                *o += d;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.acc(g, *a, |ga| {
                    for r in 0..dy.rows() {
                        let w = dy.cols();
                        for (o, d) in ga.row_mut(r)[start..start + w].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    let chunk = Tensor::from_vec(n, c, dy.data()[off * c..(off + n) * c].to_vec());
                    self.acc_tensor(g, *p, chunk);
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = dy.cols();
                let start = *start;
                self.acc(g, *a, |ga| {
                    let dst = &mut ga.data_mut()[start * c..start * c + dy.len()];
                    for (o, d) in dst.iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc(g, *a, |ga| {
                    for (r, &k) in idx.iter().enumerate() {
                        for (o, d) in ga.row_mut(k).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                self.acc(g, *a, |ga| {
                    for (r, &k) in idx.iter().enumerate() {
                        for (o, d) in ga.row_mut(r).iter_mut().zip(dy.row(k)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, segments) => {
                let c = y.cols();
                let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; nseg * c];
                for (r, &s) in segments.iter().enumerate() {
                    for j in 0..c {
                        dots[s * c + j] += dy.get(r, j) * y.get(r, j);
                    }
                }
                self.acc(g, *a, |ga| {
                    for (r, &s) in segments.iter().enumerate() {
                        for j in 0..c {
                            ga.row_mut(r)[j] += y.get(r, j) * (dy.get(r, j) - dots[s * c + j]);
                        }
                    }
                });
            }
            Op::BlockSum(a, blocks) => {
                let blocks = *blocks;
                self.acc(g, *a, |ga| {
                    let w = ga.cols() / blocks;
                    for r in 0..dy.rows() {
                        for b in 0..blocks {
                            let d = dy.get(r, b);
                            for o in &mut ga.row_mut(r)[b * w..(b + 1) * w] {
                                *o += d;
                            }
                        }
                    }
                });
            }
            Op::RepeatBlocks(a, width) => {
                let width = *width;
                self.acc(g, *a, |ga| {
                    for r in 0..ga.rows() {
                        let dr = dy.row(r);
                        for b in 0..ga.cols() {
                            ga.row_mut(r)[b] += dr[b * width..(b + 1) * width].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MeanBlocks(a, blocks) => {
                let blocks = *blocks;
                let inv = 1.0 / blocks as f64;
                self.acc(g, *a, |ga| {
                    let w = dy.cols();
                    for r in 0..dy.rows() {
                        let dr = dy.row(r);
                        let o = ga.row_mut(r);
                        for b in 0..blocks {
                            for j in 0..w {
                                o[b * w + j] += inv * dr[j];
                            }
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a).0;
                let inv = 1.0 / n.max(1) as f64;
                self.acc(g, *a, |ga| {
                    for r in 0..n {
                        for (o, d) in ga.row_mut(r).iter_mut().zip(dy.data()) {
                            *o += inv * d;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let d = dy.item();
                self.acc(g, *a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += d));
            }
            Op::RowNorm(a) => {
                let xv = self.value(*a);
                self.acc(g, *a, |ga| {
                    for r in 0..xv.rows() {
                        let norm = y.get(r, 0);
                        if norm == 0.0 {
                            continue;
                        }
                        let s = dy.get(r, 0) / norm;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *o += s * x;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.acc(g, *a, |ga| {
                    ga.add_assign(&Tensor::from_vec(r, c, dy.data().to_vec()))
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                heads,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, h) = qt.shape();
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, h);
                let mut dk = Tensor::zeros(n, h);
                let mut dv = Tensor::zeros(n, h);
                let mut off = 0;
                let mut ds = Vec::new();
                for &(start, len) in seqs {
                    for hd in 0..*heads {
                        let c0 = hd * dh;
                        for i in 0..len {
                            let p = &probs[off..off + len];
                            off += len;
                            let doi = &dy.row(start + i)[c0..c0 + dh];
                            // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ P dP)
                            ds.clear();
                            let mut dot_pd = 0.0;
                            for j in 0..len {
                                let vj = &vt.row(start + j)[c0..c0 + dh];
                                let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds.push(dp);
                                dot_pd += p[j] * dp;
                            }
                            for j in 0..len {
                                let pj = p[j];
                                for (o, d) in dv.row_mut(start + j)[c0..c0 + dh].iter_mut().zip(doi) {
                                    *o += pj * d;
                                }
                                let s = scale * pj * (ds[j] - dot_pd);
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = &kt.row(start + j)[c0..c0 + dh];
                                for (o, x) in dq.row_mut(start + i)[c0..c0 + dh].iter_mut().zip(kj) {
                                    *o += s * x;
                                }
                                let qi = &qt.row(start + i)[c0..c0 + dh];
                                for (o, x) in dk.row_mut(start + j)[c0..c0 + dh].iter_mut().zip(qi) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
                self.acc_tensor(g, *q, dq);
                self.acc_tensor(g, *k, dk);
                self.acc_tensor(g, *v, dv);
            }
            Op::CrossEntropyRows { x, targets, probs } => {
                let d = dy.item() / targets.len().max(1) as f64;
                let c = self.shape(*x).1;
                self.acc(g, *x, |gx| {
                    for (r, &t) in targets.iter().enumerate() {
                        let o = gx.row_mut(r);
                        for j in 0..c {
                            o[j] += d * probs[r * c + j];
                        }
                        o[t] -= d;
                    }
                });
            }
        }
    }
}

#[inline]
pub fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Value and derivative of the tanh-approximated GELU.
#[inline]
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}
