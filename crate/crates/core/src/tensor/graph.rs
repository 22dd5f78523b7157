use super::gemm::gemm;
use super::Tensor;
use crate::error::{CfdrError, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        cols: Vec<f32>,
    },
    MaxPool2(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, Vec<f32>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    AddScalar(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Computation tape. Nodes are appended in topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> CfdrError {
    CfdrError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn need_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(CfdrError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a rank-{rank} tensor"),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A forward-only tape: leaves never require gradients and no backward
    /// state (im2col buffers, pooling indices) is retained.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Any gradient buffer the tensor carries is ignored.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Var {
        tensor.zero_grad();
        self.push(tensor, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of a node's value with its gradient attached (if any).
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        if let Some(g) = &node.grad {
            t.grad = Some(g.clone());
        }
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        need_rank("matmul", ta, 2)?;
        need_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("transpose", ta, 2)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose(a)))
    }

    /// `x·wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        need_rank("linear", tx, 2)?;
        need_rank("linear", tw, 2)?;
        let (batch, inp, outp) = (tx.shape[0], tx.shape[1], tw.shape[0]);
        if tw.shape[1] != inp {
            return Err(mismatch("linear", tx, tw));
        }
        let mut out = vec![0.0; batch * outp];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape != [outp] {
                return Err(mismatch("linear bias", tw, tb));
            }
            for row in out.chunks_mut(outp) {
                row.copy_from_slice(&tb.data);
            }
        }
        gemm(batch, inp, outp, &tx.data, false, &tw.data, true, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![batch, outp], out)?, rg, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("add", ta, tb));
        }
        let out: Vec<f32> = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch("mul", ta, tb));
        }
        let out: Vec<f32> = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Relu(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data.iter().map(|x| x.exp()).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data.iter().map(|x| x.ln()).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().map(|&x| x as f64).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s as f32), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().map(|&x| x as f64).sum();
        let m = s / ta.data.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m as f32), rg, Op::Mean(a)))
    }

    /// Sums a 2-D tensor along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        need_rank("sum_axis", ta, 2)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let out = match axis {
            0 => {
                let mut out = vec![0.0f32; n];
                for row in ta.data.chunks(n) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
            1 => ta.data.chunks(n).map(|r| r.iter().sum()).collect(),
            _ => {
                return Err(CfdrError::OutOfRange {
                    what: "axis",
                    value: axis,
                    limit: 2,
                })
            }
        };
        let len = if axis == 0 { n } else { m };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len], out)?, rg, Op::SumAxis(a, axis)))
    }

    /// 2-D convolution, stride 1, symmetric zero padding.
    /// `x: [B, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        need_rank("conv2d", tx, 4)?;
        need_rank("conv2d", tw, 4)?;
        let (bs, c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (o, kc, k, k2) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
        if kc != c || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", tx, tw));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape != [o] {
                return Err(mismatch("conv2d bias", tw, tb));
            }
        }
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let ckk = c * k * k;
        let ohw = oh * ow;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep_cols = rg;
        let mut cols_all = if keep_cols { vec![0.0; bs * ckk * ohw] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; ckk * ohw] };
        let mut out = vec![0.0; bs * o * ohw];
        let bias = b.map(|b| self.value(b).data.clone());
        let img = c * h * wd;
        for bi in 0..bs {
            let cols = if keep_cols {
                &mut cols_all[bi * ckk * ohw..(bi + 1) * ckk * ohw]
            } else {
                &mut scratch[..]
            };
            im2col(&tx.data[bi * img..(bi + 1) * img], c, h, wd, k, pad, oh, ow, cols);
            let ob = &mut out[bi * o * ohw..(bi + 1) * o * ohw];
            if let Some(bias) = &bias {
                for (oc, row) in ob.chunks_mut(ohw).enumerate() {
                    row.fill(bias[oc]);
                }
            }
            gemm(o, ckk, ohw, &tw.data, false, cols, false, 1.0, ob);
        }
        let t = Tensor::new(vec![bs, o, oh, ow], out)?;
        Ok(self.push(
            t,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                pad,
                cols: cols_all,
            },
        ))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major order within each window.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("max_pool2", ta, 4)?;
        let (bs, c, h, w) = (ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]);
        if h < 2 || w < 2 {
            return Err(CfdrError::InvalidShape {
                shape: ta.shape.clone(),
                reason: "max_pool2 needs spatial dims >= 2".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bs * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..bs * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = base + (2 * i) * w + 2 * j;
                    let mut best = ta.data[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if ta.data[idx] > best {
                            best = ta.data[idx];
                            best_idx = idx;
                        }
                    }
                    let oi = plane * oh * ow + i * ow + j;
                    out[oi] = best;
                    arg[oi] = best_idx;
                }
            }
        }
        let rg = self.rg(a);
        if !rg {
            arg = Vec::new();
        }
        Ok(self.push(Tensor::new(vec![bs, c, oh, ow], out)?, rg, Op::MaxPool2(a, arg)))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("global_avg_pool", ta, 4)?;
        let (bs, c) = (ta.shape[0], ta.shape[1]);
        let hw = ta.shape[2] * ta.shape[3];
        let out: Vec<f32> = ta
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![bs, c], out)?, rg, Op::GlobalAvgPool(a)))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("softmax", ta, 2)?;
        let n = ta.shape[1];
        let mut out = ta.data.clone();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax(a)))
    }

    /// Row-wise numerically stable log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("log_softmax", ta, 2)?;
        let n = ta.shape[1];
        let mut out = ta.data.clone();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f32>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::LogSoftmax(a)))
    }

    /// Normalizes each row of a 2-D tensor to unit Euclidean norm.
    /// A zero row maps to a zero row (with a logged warning).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        need_rank("l2_normalize", ta, 2)?;
        let n = ta.shape[1];
        let mut out = ta.data.clone();
        let mut norms = Vec::with_capacity(ta.shape[0]);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                log::warn!("l2_normalize: zero vector left unnormalized");
            }
            norms.push(norm);
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::L2Normalize(a, norms)))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| CfdrError::InvalidInput("concat of nothing".into()))?;
        let tail = self.value(*first).shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape[1..] != tail[..] {
                return Err(mismatch("concat", self.value(*first), t));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat(parts.to_vec())))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, end)?;
        let stride = t.numel() / (end - start);
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::SliceRows(a, start * stride)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data.iter().map(|x| x + c).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddScalar(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    // ---- composites ---------------------------------------------------------

    /// Mean cross-entropy of `logits: [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        need_rank("cross_entropy", t, 2)?;
        let (b, c) = (t.shape[0], t.shape[1]);
        if labels.len() != b {
            return Err(CfdrError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let mut onehot = vec![0.0; b * c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(CfdrError::OutOfRange {
                    what: "label",
                    value: l,
                    limit: c,
                });
            }
            onehot[i * c + l] = 1.0;
        }
        let mask = self.constant(Tensor::new(vec![b, c], onehot)?);
        let lsm = self.log_softmax(logits)?;
        let picked = self.mul(lsm, mask)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / b as f32)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate on every node
    /// that requires them; call [`Graph::zero_grad`] before a second pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CfdrError::Backward(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(CfdrError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lt.shape
            )));
        }
        if !self.rg(loss) {
            return Err(CfdrError::Backward(
                "loss is detached from every gradient-requiring input".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut Vec<f32>, &Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let len = node.value.numel();
        let slot = accumulate(&mut node.grad, len);
        f(slot, &node.value);
    }

    fn val(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value.data
    }

    fn backprop_node(&mut self, idx: usize, g: &[f32]) {
        // Temporarily detach the op so that sibling nodes can be mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let out_shape = self.nodes[idx].value.shape.clone();
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape[0], self.value(a).shape[1]);
                let n = self.value(b).shape[1];
                if self.rg(a) {
                    let bv = self.val(b).to_vec();
                    self.add_grad(a, |ga, _| gemm(m, n, k, g, false, &bv, true, 1.0, ga));
                }
                if self.rg(b) {
                    let av = self.val(a).to_vec();
                    self.add_grad(b, |gb, _| gemm(k, m, n, &av, true, g, false, 1.0, gb));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.value(a).shape[0], self.value(a).shape[1]);
                self.add_grad(a, |ga, _| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Linear { x, w, b } => {
                let (batch, inp) = (self.value(x).shape[0], self.value(x).shape[1]);
                let outp = self.value(w).shape[0];
                if self.rg(x) {
                    let wv = self.val(w).to_vec();
                    self.add_grad(x, |gx, _| gemm(batch, outp, inp, g, false, &wv, false, 1.0, gx));
                }
                if self.rg(w) {
                    let xv = self.val(x).to_vec();
                    self.add_grad(w, |gw, _| gemm(outp, batch, inp, g, true, &xv, false, 1.0, gw));
                }
                if let Some(b) = b {
                    self.add_grad(b, |gb, _| {
                        for row in g.chunks(outp) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.add_grad(v, |gv, _| {
                        for (o, &d) in gv.iter_mut().zip(g) {
                            *o += d;
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                let bv = self.val(b).to_vec();
                self.add_grad(a, |ga, _| {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += d * y;
                    }
                });
                let av = self.val(a).to_vec();
                self.add_grad(b, |gb, _| {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *o += d * x;
                    }
                });
            }
            &Op::Scale(a, c) => self.add_grad(a, |ga, _| {
                for (o, &d) in ga.iter_mut().zip(g) {
                    *o += d * c;
                }
            }),
            &Op::Relu(a) => self.add_grad(a, |ga, x| {
                for ((o, &d), &xv) in ga.iter_mut().zip(g).zip(&x.data) {
                    if xv > 0.0 {
                        *o += d;
                    }
                }
            }),
            &Op::Exp(a) => {
                let y = self.nodes[idx].value.data.clone();
                self.add_grad(a, |ga, _| {
                    for ((o, &d), &yv) in ga.iter_mut().zip(g).zip(&y) {
                        *o += d * yv;
                    }
                })
            }
            &Op::Log(a) => self.add_grad(a, |ga, x| {
                for ((o, &d), &xv) in ga.iter_mut().zip(g).zip(&x.data) {
                    *o += d / xv;
                }
            }),
            &Op::Sum(a) => self.add_grad(a, |ga, _| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            &Op::Mean(a) => self.add_grad(a, |ga, _| {
                let s = g[0] / ga.len() as f32;
                for o in ga.iter_mut() {
                    *o += s;
                }
            }),
            &Op::SumAxis(a, axis) => self.add_grad(a, |ga, x| {
                let n = x.shape[1];
                for (i, row) in ga.chunks_mut(n).enumerate() {
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += if axis == 0 { g[j] } else { g[i] };
                    }
                }
            }),
            Op::Conv2d { x, w, b, pad, cols } => {
                let (x, w, b, pad) = (*x, *w, *b, *pad);
                let xs = self.value(x).shape.clone();
                let ws = self.value(w).shape.clone();
                let (bs, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let ckk = c * k * k;
                let ohw = oh * ow;
                if self.rg(w) {
                    self.add_grad(w, |gw, _| {
                        for bi in 0..bs {
                            let gb = &g[bi * o * ohw..(bi + 1) * o * ohw];
                            let cb = &cols[bi * ckk * ohw..(bi + 1) * ckk * ohw];
                            gemm(o, ohw, ckk, gb, false, cb, true, 1.0, gw);
                        }
                    });
                }
                if let Some(b) = b {
                    self.add_grad(b, |gbias, _| {
                        for bi in 0..bs {
                            for (oc, row) in g[bi * o * ohw..(bi + 1) * o * ohw].chunks(ohw).enumerate() {
                                gbias[oc] += row.iter().sum::<f32>();
                            }
                        }
                    });
                }
                if self.rg(x) {
                    let wv = self.val(w).to_vec();
                    let img = c * h * wd;
                    self.add_grad(x, |gx, _| {
                        let mut dcols = vec![0.0; ckk * ohw];
                        for bi in 0..bs {
                            let gb = &g[bi * o * ohw..(bi + 1) * o * ohw];
                            gemm(ckk, o, ohw, &wv, true, gb, false, 0.0, &mut dcols);
                            col2im(&dcols, c, h, wd, k, pad, oh, ow, &mut gx[bi * img..(bi + 1) * img]);
                        }
                    });
                }
            }
            Op::MaxPool2(a, arg) => {
                let a = *a;
                self.add_grad(a, |ga, _| {
                    for (&src, &d) in arg.iter().zip(g) {
                        ga[src] += d;
                    }
                });
            }
            &Op::GlobalAvgPool(a) => self.add_grad(a, |ga, x| {
                let hw = x.shape[2] * x.shape[3];
                for (p, plane) in ga.chunks_mut(hw).enumerate() {
                    let d = g[p] / hw as f32;
                    for o in plane.iter_mut() {
                        *o += d;
                    }
                }
            }),
            &Op::Softmax(a) => {
                let y = self.nodes[idx].value.data.clone();
                let n = out_shape[1];
                self.add_grad(a, |ga, _| {
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((o, &d), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (d - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax(a) => {
                let y = self.nodes[idx].value.data.clone();
                let n = out_shape[1];
                self.add_grad(a, |ga, _| {
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs: f32 = grow.iter().sum();
                        for ((o, &d), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += d - yv.exp() * gs;
                        }
                    }
                })
            }
            Op::L2Normalize(a, norms) => {
                let a = *a;
                let y = self.nodes[idx].value.data.clone();
                let n = out_shape[1];
                self.add_grad(a, |ga, _| {
                    for (r, ((orow, grow), yrow)) in
                        ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let norm = norms[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f32 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((o, &d), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (d - yv * dot) / norm;
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    self.add_grad(p, |gp, _| {
                        for (o, &d) in gp.iter_mut().zip(slice) {
                            *o += d;
                        }
                    });
                    offset += len;
                }
            }
            &Op::SliceRows(a, offset) => self.add_grad(a, |ga, _| {
                for (o, &d) in ga[offset..offset + g.len()].iter_mut().zip(g) {
                    *o += d;
                }
            }),
            &Op::Reshape(a) | &Op::AddScalar(a) => self.add_grad(a, |ga, _| {
                for (o, &d) in ga.iter_mut().zip(g) {
                    *o += d;
                }
            }),
        }
        self.nodes[idx].op = op;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize, cols: &mut [f32]) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for i in 0..oh {
                    let si = i + ki;
                    let drow = &mut dst[i * ow..(i + 1) * ow];
                    if si < pad || si - pad >= h {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + si - pad) * w..(ci * h + si - pad + 1) * w];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let sj = j + kj;
                        *d = if sj < pad || sj - pad >= w { 0.0 } else { src[sj - pad] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize, x: &mut [f32]) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for i in 0..oh {
                    let si = i + ki;
                    if si < pad || si - pad >= h {
                        continue;
                    }
                    let dst = &mut x[(ci * h + si - pad) * w..(ci * h + si - pad + 1) * w];
                    for j in 0..ow {
                        let sj = j + kj;
                        if sj >= pad && sj - pad < w {
                            dst[sj - pad] += src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}
