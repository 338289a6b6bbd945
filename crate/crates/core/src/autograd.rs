//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its producers. A node requires a gradient only if it
//! is a trainable parameter leaf or depends on one; constants and frozen
//! parameters never receive gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows(NodeId, Vec<f64>),
    MeanBatch(NodeId),
    BroadcastBatch(NodeId),
    SelectRow(NodeId, usize),
    Gather(NodeId, Vec<Option<usize>>),
    MulScalar(NodeId, NodeId),
    Std(NodeId),
    ConcatChannels(NodeId, NodeId),
    CatBatch(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<f64> },
    Silu(NodeId),
    GlobalAvgPool(NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    SoftmaxCeSum { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    BceLogitsSum { scores: NodeId, labels: Vec<f64> },
    SquaredErrorMean(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp applied inside every log of the classification losses.
pub const PROB_CLAMP: f64 = 1e-7;

const STD_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `id`, or zeros if nothing flowed into it.
    pub fn get_or_zero(&self, id: NodeId) -> Tensor {
        self.get(id).unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable parameters registered on this tape, in registration order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf. The name keys the gradient back to its parameter.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> NodeId {
        let id = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.into(), id));
        id
    }

    /// Copy of `id`'s value with no gradient connection.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let v = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiply batch row j by `factors[j]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if factors.len() != va.batch() {
            return Err(Error::Shape(format!(
                "scale_rows: {} factors for batch {}",
                factors.len(),
                va.batch()
            )));
        }
        let n = va.row_len();
        let mut data = va.data().to_vec();
        for (j, f) in factors.iter().enumerate() {
            data[j * n..(j + 1) * n].iter_mut().for_each(|x| *x *= f);
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::ScaleRows(a, factors), rg))
    }

    /// Mean over the batch axis, keeping it as size 1.
    pub fn mean_batch(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let b = va.batch();
        if b == 0 {
            return Err(Error::Shape("mean over empty batch".into()));
        }
        let n = va.row_len();
        let mut data = vec![0.0; n];
        for j in 0..b {
            for (acc, x) in data.iter_mut().zip(va.row(j)) {
                *acc += x;
            }
        }
        let inv = 1.0 / b as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let mut shape = va.shape().to_vec();
        shape[0] = 1;
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MeanBatch(a), rg))
    }

    /// Tile a batch-1 node `batch` times.
    pub fn broadcast_batch(&mut self, a: NodeId, batch: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.batch() != 1 {
            return Err(Error::Shape(format!("broadcast_batch needs batch 1, got {:?}", va.shape())));
        }
        let mut data = Vec::with_capacity(va.numel() * batch);
        for _ in 0..batch {
            data.extend_from_slice(va.data());
        }
        let mut shape = va.shape().to_vec();
        shape[0] = batch;
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::BroadcastBatch(a), rg))
    }

    pub fn select_row(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if index >= va.batch() {
            return Err(Error::Shape(format!("row {index} of batch {}", va.batch())));
        }
        let v = va.slice_batch(index, index + 1);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SelectRow(a, index), rg))
    }

    /// `out[i] = a[src[i]]`, or 0 where `src[i]` is `None`. Output keeps `a`'s shape.
    pub fn gather(&mut self, a: NodeId, src: Vec<Option<usize>>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if src.len() != va.numel() {
            return Err(Error::Shape(format!("gather: {} indices for {} values", src.len(), va.numel())));
        }
        let n = va.numel();
        let mut data = Vec::with_capacity(n);
        for s in &src {
            match s {
                Some(j) if *j < n => data.push(va.data()[*j]),
                Some(j) => return Err(Error::Shape(format!("gather index {j} out of {n}"))),
                None => data.push(0.0),
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Gather(a, src), rg))
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = &self.nodes[s.0].value;
        if vs.numel() != 1 {
            return Err(Error::Shape(format!("mul_scalar needs a scalar, got {:?}", vs.shape())));
        }
        let c = vs.item();
        let va = &self.nodes[a.0].value;
        let v = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(v, Op::MulScalar(a, s), rg))
    }

    /// Population standard deviation over all elements (with a tiny floor inside the root).
    pub fn std_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.numel() as f64;
        let mean = va.data().iter().sum::<f64>() / n;
        let var = va.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar((var + STD_EPS).sqrt()), Op::Std(a), rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels {sa:?} with {sb:?}")));
        }
        let (bsz, ca, cb) = (sa[0], sa[1], sb[1]);
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity(bsz * (ca + cb) * plane);
        for j in 0..bsz {
            data.extend_from_slice(va.row(j));
            data.extend_from_slice(vb.row(j));
        }
        let v = Tensor::new(vec![bsz, ca + cb, sa[2], sa[3]], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::ConcatChannels(a, b), rg))
    }

    pub fn cat_batch(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let v = Tensor::cat_batch(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::CatBatch(parts.to_vec()), rg))
    }

    /// Sum of single-element nodes.
    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.numel() != 1 {
                return Err(Error::Shape(format!("sum_scalars got {:?}", v.shape())));
            }
            total += v.item();
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), rg))
    }

    /// 2-D convolution, NCHW input, weight `[out, in, k, k]`, bias `[out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] || vb.shape() != [sw[0]] {
            return Err(Error::Shape(format!(
                "conv2d input {sx:?}, weight {sw:?}, bias {:?}",
                vb.shape()
            )));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {k} does not fit input {sx:?}")));
        }
        let g = ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            out_c: sw[0],
            h: sx[2],
            w: sx[3],
            k,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - k) / stride + 1,
            ow: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let (kr, p) = (g.col_rows(), g.col_cols());
        let mut cols = vec![0.0; g.batch * kr * p];
        let mut out = vec![0.0; g.batch * g.out_c * p];
        let in_plane = g.in_c * g.h * g.w;
        for n in 0..g.batch {
            let col = &mut cols[n * kr * p..(n + 1) * kr * p];
            im2col(&vx.data()[n * in_plane..(n + 1) * in_plane], &g, col);
            let o = &mut out[n * g.out_c * p..(n + 1) * g.out_c * p];
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(vb.data()[co]);
            }
            gemm(g.out_c, kr, p, vw.data(), false, col, false, o, 1.0);
        }
        let v = Tensor::new(vec![g.batch, g.out_c, g.oh, g.ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom: g, cols }, rg))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let v = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * sigmoid(*x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    /// `[B, C, h, w] -> [B, C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs rank 4, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let data = va
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::GlobalAvgPool(a), rg))
    }

    /// `x [B, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || vb.shape() != [sw[0]] {
            return Err(Error::Shape(format!("linear input {sx:?}, weight {sw:?}, bias {:?}", vb.shape())));
        }
        let (bsz, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; bsz * fout];
        for n in 0..bsz {
            let xr = &vx.data()[n * fin..(n + 1) * fin];
            for o in 0..fout {
                let wr = &vw.data()[o * fin..(o + 1) * fin];
                out[n * fout + o] = vb.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let v = Tensor::new(vec![bsz, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Summed cross-entropy `Σ_j −log clamp(softmax(s_j)[y_j])`.
    pub fn softmax_ce_sum(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let vl = &self.nodes[logits.0].value;
        let s = vl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("cross-entropy logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Argument(format!("label {bad} out of range 0..{k}")));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let row = vl.row(j);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                probs[j * k + c] = (v - max).exp() / z;
            }
            let p = probs[j * k + y].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= p.ln();
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxCeSum { logits, labels, probs }, rg))
    }

    /// Summed binary cross-entropy on pre-sigmoid scores `[B]` or `[B, 1]`.
    pub fn bce_logits_sum(&mut self, scores: NodeId, labels: Vec<f64>) -> Result<NodeId> {
        let vs = &self.nodes[scores.0].value;
        if vs.numel() != labels.len() {
            return Err(Error::Shape(format!("bce: {} scores for {} labels", vs.numel(), labels.len())));
        }
        let mut total = 0.0;
        for (s, y) in vs.data().iter().zip(&labels) {
            let p = sigmoid(*s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(Tensor::scalar(total), Op::BceLogitsSum { scores, labels }, rg))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, "mse")?;
        let n = va.numel() as f64;
        let v = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::SquaredErrorMean(a, b), rg))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!("backward root must be scalar, got {:?}", shapes[root.0])));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |s| {
                    s.iter_mut().zip(g).zip(vb).for_each(|((s, g), y)| *s += g * y)
                });
                self.acc(grads, *b, |s| {
                    s.iter_mut().zip(g).zip(va).for_each(|((s, g), x)| *s += g * x)
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::ScaleRows(a, f) => {
                let n = self.val(*a).row_len();
                self.acc(grads, *a, |s| {
                    for (j, fj) in f.iter().enumerate() {
                        for t in j * n..(j + 1) * n {
                            s[t] += fj * g[t];
                        }
                    }
                });
            }
            Op::MeanBatch(a) => {
                let va = self.val(*a);
                let (b, n) = (va.batch(), va.row_len());
                let inv = 1.0 / b as f64;
                self.acc(grads, *a, |s| {
                    for j in 0..b {
                        for t in 0..n {
                            s[j * n + t] += g[t] * inv;
                        }
                    }
                });
            }
            Op::BroadcastBatch(a) => {
                let n = self.val(*a).numel();
                self.acc(grads, *a, |s| {
                    for chunk in g.chunks(n) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::SelectRow(a, idx) => {
                let n = self.val(*a).row_len();
                self.acc(grads, *a, |s| add_into(&mut s[idx * n..(idx + 1) * n], g));
            }
            Op::Gather(a, src) => self.acc(grads, *a, |s| {
                for (gi, si) in g.iter().zip(src) {
                    if let Some(j) = si {
                        s[*j] += gi;
                    }
                }
            }),
            Op::MulScalar(a, sc) => {
                let c = self.val(*sc).item();
                let va = self.val(*a).data();
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
                self.acc(grads, *sc, |s| s[0] += g.iter().zip(va).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::Std(a) => {
                let va = self.val(*a).data();
                let n = va.len() as f64;
                let mean = va.iter().sum::<f64>() / n;
                let sd = node.value.item();
                self.acc(grads, *a, |s| {
                    for (si, x) in s.iter_mut().zip(va) {
                        *si += g[0] * (x - mean) / (n * sd);
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (na, nb) = (self.val(*a).row_len(), self.val(*b).row_len());
                let bsz = self.val(*a).batch();
                self.acc(grads, *a, |s| {
                    for j in 0..bsz {
                        add_into(&mut s[j * na..(j + 1) * na], &g[j * (na + nb)..j * (na + nb) + na]);
                    }
                });
                self.acc(grads, *b, |s| {
                    for j in 0..bsz {
                        add_into(&mut s[j * nb..(j + 1) * nb], &g[j * (na + nb) + na..(j + 1) * (na + nb)]);
                    }
                });
            }
            Op::CatBatch(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).numel();
                    self.acc(grads, *p, |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.acc(grads, *p, |s| s[0] += g[0]);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols, g, grads),
            Op::Silu(a) => {
                let va = self.val(*a).data();
                self.acc(grads, *a, |s| {
                    for ((si, gi), x) in s.iter_mut().zip(g).zip(va) {
                        let sg = sigmoid(*x);
                        *si += gi * sg * (1.0 + x * (1.0 - sg));
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let sa = self.val(*a).shape();
                let plane = sa[2] * sa[3];
                let inv = 1.0 / plane as f64;
                self.acc(grads, *a, |s| {
                    for (c, chunk) in s.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += g[c] * inv);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.val(*x), self.val(*w));
                let (bsz, fin) = (vx.shape()[0], vx.shape()[1]);
                let fout = vw.shape()[0];
                self.acc(grads, *x, |s| {
                    for n in 0..bsz {
                        for o in 0..fout {
                            let go = g[n * fout + o];
                            for i in 0..fin {
                                s[n * fin + i] += go * vw.data()[o * fin + i];
                            }
                        }
                    }
                });
                self.acc(grads, *w, |s| {
                    for n in 0..bsz {
                        for o in 0..fout {
                            let go = g[n * fout + o];
                            for i in 0..fin {
                                s[o * fin + i] += go * vx.data()[n * fin + i];
                            }
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for n in 0..bsz {
                        add_into(s, &g[n * fout..(n + 1) * fout]);
                    }
                });
            }
            Op::SoftmaxCeSum { logits, labels, probs } => {
                let k = self.val(*logits).shape()[1];
                self.acc(grads, *logits, |s| {
                    for (j, &y) in labels.iter().enumerate() {
                        let p = probs[j * k + y];
                        // Clamped region has zero derivative.
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            s[j * k + c] += g[0] * (probs[j * k + c] - onehot);
                        }
                    }
                });
            }
            Op::BceLogitsSum { scores, labels } => {
                let vs = self.val(*scores).data();
                self.acc(grads, *scores, |s| {
                    for ((si, x), y) in s.iter_mut().zip(vs).zip(labels) {
                        let p = sigmoid(*x);
                        if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            *si += g[0] * (p - y);
                        }
                    }
                });
            }
            Op::SquaredErrorMean(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let c = 2.0 * g[0] / va.len() as f64;
                self.acc(grads, *a, |s| {
                    for ((si, x), y) in s.iter_mut().zip(va).zip(vb) {
                        *si += c * (x - y);
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((si, x), y) in s.iter_mut().zip(va).zip(vb) {
                        *si -= c * (x - y);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: &ConvGeom,
        cols: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (kr, p) = (geom.col_rows(), geom.col_cols());
        let out_plane = geom.out_c * p;
        self.acc(grads, b, |s| {
            for n in 0..geom.batch {
                for (co, chunk) in g[n * out_plane..(n + 1) * out_plane].chunks(p).enumerate() {
                    s[co] += chunk.iter().sum::<f64>();
                }
            }
        });
        self.acc(grads, w, |s| {
            for n in 0..geom.batch {
                let gn = &g[n * out_plane..(n + 1) * out_plane];
                let col = &cols[n * kr * p..(n + 1) * kr * p];
                // dW[out, kr] += dY[out, p] · colsᵀ[p, kr]
                gemm(geom.out_c, p, kr, gn, false, col, true, s, 1.0);
            }
        });
        let wv = self.val(w).data();
        let in_plane = geom.in_c * geom.h * geom.w;
        self.acc(grads, x, |s| {
            let mut dcol = vec![0.0; kr * p];
            for n in 0..geom.batch {
                let gn = &g[n * out_plane..(n + 1) * out_plane];
                dcol.fill(0.0);
                // dcols[kr, p] = Wᵀ[kr, out] · dY[out, p]
                gemm(kr, geom.out_c, p, wv, true, gn, false, &mut dcol, 0.0);
                col2im(&dcol, geom, &mut s[n * in_plane..(n + 1) * in_plane]);
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, where `a`/`b` may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe row-major
    // (or transposed row-major) layouts that stay inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "autograd-test", 0);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(root)/d(leaf) for a closure that builds the graph.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, i as u64 + 1)).collect();
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().enumerate().map(|(i, t)| tape.param(format!("p{i}"), t)).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zero(ids[i]);
            for e in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            let mut v = v.clone();
                            if j == i {
                                v.data_mut()[e] += delta;
                            }
                            t.param(format!("p{j}"), &v)
                        })
                        .collect();
                    let r = build(&mut t, &ids);
                    t.value(r).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {i} element {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn sum_all(t: &mut Tape, x: NodeId) -> NodeId {
        let zero = t.constant(Tensor::zeros(t.shape(x)));
        // mean((x-0)^2) is a smooth scalar reduction touching every element.
        t.mse(x, zero).unwrap()
    }

    #[test]
    fn conv2d_gradients() {
        check(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, p| {
            let y = t.conv2d(p[0], p[1], p[2], 2, 1).unwrap();
            sum_all(t, y)
        });
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 4, 4], 3);
        let w = rand_tensor(&[3, 2, 3, 3], 4);
        let b = rand_tensor(&[3], 5);
        let mut t = Tape::new();
        let (xi, wi, bi) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xi, wi, bi, 2, 1).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        for co in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 4 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(co * 2 + oy) * 2 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_and_row_ops_gradients() {
        check(&[&[3, 2, 2, 2], &[3, 2, 2, 2]], |t, p| {
            let m = t.mean_batch(p[0]).unwrap();
            let mb = t.broadcast_batch(m, 3).unwrap();
            let d = t.sub(p[0], mb).unwrap();
            let sr = t.scale_rows(d, vec![0.3, 0.7, 0.1]).unwrap();
            let a = t.select_row(p[1], 2).unwrap();
            let ab = t.broadcast_batch(a, 3).unwrap();
            let prod = t.mul(sr, ab).unwrap();
            let s = t.std_all(p[1]);
            let ms = t.mul_scalar(prod, s).unwrap();
            let cat = t.concat_channels(ms, p[1]).unwrap();
            let idx: Vec<Option<usize>> =
                (0..48).map(|i| if i % 5 == 0 { None } else { Some((i * 7) % 48) }).collect();
            let gthr = t.gather(cat, idx).unwrap();
            let act = t.silu(gthr);
            sum_all(t, act)
        });
    }

    #[test]
    fn head_and_loss_gradients() {
        check(&[&[4, 3, 2, 2], &[3, 3], &[3], &[1, 3], &[1]], |t, p| {
            let pooled = t.global_avg_pool(p[0]).unwrap();
            let logits = t.linear(pooled, p[1], p[2]).unwrap();
            let ce = t.softmax_ce_sum(logits, vec![0, 2, 1, 2]).unwrap();
            let score = t.linear(pooled, p[3], p[4]).unwrap();
            let bce = t.bce_logits_sum(score, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
            let half = t.scale(bce, 0.5);
            let cat = t.cat_batch(&[logits, logits]).unwrap();
            let m = sum_all(t, cat);
            t.sum_scalars(&[ce, half, m]).unwrap()
        });
    }

    #[test]
    fn constants_and_detached_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.param("a", &Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let d = t.detach(a);
        let c = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let x = t.mul(d, c).unwrap();
        let y = t.mul(a, x).unwrap();
        let root = sum_all(&mut t, y);
        let g = t.backward(root).unwrap();
        assert!(g.get(d).is_none());
        assert!(g.get(c).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.softmax_ce_sum(a, vec![0, 5]), Err(Error::Argument(_))));
    }
}
