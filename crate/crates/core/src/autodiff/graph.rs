use super::{GraphError, Tensor};

/// Lower bound applied to the argument of `log` (and inside KL) unless the
/// caller opts out of clamping.
pub const LOG_FLOOR: f64 = 1e-12;

/// Floor applied to vector norms inside cosine similarity.
const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MaxScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId, Option<f64>),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    ConcatLast(NodeId, NodeId),
    SelectRows(NodeId, Vec<usize>),
    L2NormLast(NodeId),
    CosineLast(NodeId, NodeId),
    KlLast {
        p: NodeId,
        q: NodeId,
        floor: Option<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and [`Graph::backward`] walks them in reverse.
/// Gradients accumulate across repeated `backward` calls until
/// [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank_error(op: &'static str, expected: usize, t: &Tensor) -> GraphError {
    GraphError::Rank {
        op,
        expected,
        shape: t.shape().to_vec(),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Broadcast pattern of a binary elementwise op.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>), GraphError> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if b.numel() == 1 && b.rank() == 0 {
        Ok((Bcast::RhsScalar, a.shape().to_vec()))
    } else if a.numel() == 1 && a.rank() == 0 {
        Ok((Bcast::LhsScalar, b.shape().to_vec()))
    } else {
        Err(mismatch(op, a, b))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.numel(), 1, "item() on a node of shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of the root(s) with respect to `id`; zeros when
    /// nothing has flowed into it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let value = &self.nodes[id.0].value;
        match &self.grads[id.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Copy of `x` that blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (mode, shape) = bcast(name, va, vb)?;
        let data: Vec<f64> = match mode {
            Bcast::Same => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::RhsScalar => {
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::LhsScalar => {
                let x = va.data()[0];
                vb.data().iter().map(|&y| f(x, y)).collect()
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |t| -t, Op::Neg(x))
    }

    /// `c * x`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |t| c * t, Op::Scale(x, c))
    }

    /// `x + c`.
    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |t| t + c, Op::Offset(x))
    }

    /// Elementwise `max(x, c)`. At the kink the gradient is taken from the
    /// constant branch, i.e. zero.
    pub fn max_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |t| t.max(c), Op::MaxScalar(x, c))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |t| t.max(LOG_FLOOR).ln(), Op::Log(x, Some(LOG_FLOOR)))
    }

    /// Natural log without clamping; any non-positive input is rejected.
    pub fn log_strict(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        if let Some(&bad) = self
            .value(x)
            .data()
            .iter()
            .find(|&&t| t.is_nan() || t <= 0.0)
        {
            return Err(GraphError::NonPositiveLog {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x, None)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |t| t.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for t in row.iter_mut() {
                *t = (*t - m).exp();
                s += *t;
            }
            for t in row.iter_mut() {
                *t /= s;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let data = v.data().chunks(d).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(v.leading_shape(), data).expect("leading shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumLast(x), rg)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 {
            return Err(rank_error("matmul", 2, va));
        }
        if vb.rank() != 2 {
            return Err(rank_error("matmul", 2, vb));
        }
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let (k2, m) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(mismatch("matmul", va, vb));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(va.data(), vb.data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rank() != 1 || vb.numel() != vx.last_dim() || vx.rank() == 0 {
            return Err(mismatch("add_bias", vx, vb));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(vb.numel()) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Stride-1 2-D convolution with zero padding.
    ///
    /// `input [n, c, h, w]`, `weight [o, c, kh, kw]`, `bias [o]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        if vi.rank() != 4 {
            return Err(rank_error("conv2d", 4, vi));
        }
        if vw.rank() != 4 {
            return Err(rank_error("conv2d", 4, vw));
        }
        let geo = ConvGeometry::new(vi.shape(), vw.shape(), pad)
            .ok_or_else(|| mismatch("conv2d", vi, vw))?;
        if vb.shape() != [geo.o] {
            return Err(mismatch("conv2d", vw, vb));
        }
        let out = geo.forward(vi.data(), vw.data(), vb.data());
        let out = Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]`; odd trailing
    /// rows/columns are dropped.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let v = self.value(input);
        if v.rank() != 4 {
            return Err(rank_error("max_pool2", 4, v));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = v.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() == 0 || va.leading_shape() != vb.leading_shape() || vb.rank() == 0 {
            return Err(mismatch("concat_last", va, vb));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for (ra, rb) in va.data().chunks(da).zip(vb.data().chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = va.leading_shape();
        shape.push(da + db);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(a, b), rg))
    }

    /// Gathers rows (first axis) of `x` in the given order.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, GraphError> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(GraphError::Rank {
                op: "select_rows",
                expected: 1,
                shape: v.shape().to_vec(),
            });
        }
        let n = v.shape()[0];
        let per = v.numel() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= n {
                return Err(GraphError::ShapeMismatch {
                    op: "select_rows",
                    lhs: v.shape().to_vec(),
                    rhs: vec![r + 1],
                });
            }
            out.extend_from_slice(&v.data()[r * per..(r + 1) * per]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SelectRows(x, rows.to_vec()),
            rg,
        ))
    }

    /// Euclidean norm over the last axis. The gradient at a zero vector is
    /// taken as zero.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let data = v
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|t| t * t).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(v.leading_shape(), data).expect("leading shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormLast(x), rg)
    }

    /// Cosine similarity between matching rows (last axis) of `a` and `b`.
    /// Rows with zero norm are rejected.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rank() == 0 {
            return Err(mismatch("cosine", va, vb));
        }
        let d = va.last_dim();
        let mut out = Vec::with_capacity(va.numel() / d);
        for (row, (ra, rb)) in va.data().chunks(d).zip(vb.data().chunks(d)).enumerate() {
            let na = norm(ra);
            let nb = norm(rb);
            if na < NORM_EPS || nb < NORM_EPS {
                return Err(GraphError::ZeroNorm { op: "cosine", row });
            }
            out.push(dot(ra, rb) / (na * nb));
        }
        let out = Tensor::new(va.leading_shape(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::CosineLast(a, b), rg))
    }

    /// `KL(p || q)` over the last axis with the default log clamp.
    pub fn kl(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, GraphError> {
        self.kl_with_floor(p, q, Some(LOG_FLOOR))
    }

    /// `KL(p || q)` over the last axis. With `floor = None` any zero or
    /// negative probability is rejected.
    pub fn kl_with_floor(
        &mut self,
        p: NodeId,
        q: NodeId,
        floor: Option<f64>,
    ) -> Result<NodeId, GraphError> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() || vp.rank() == 0 {
            return Err(mismatch("kl", vp, vq));
        }
        if floor.is_none() {
            let bad = vp
                .data()
                .iter()
                .chain(vq.data())
                .find(|&&t| t.is_nan() || t <= 0.0);
            if let Some(&value) = bad {
                return Err(GraphError::NonPositiveLog { op: "kl", value });
            }
        }
        let lf = floor.unwrap_or(0.0);
        let d = vp.last_dim();
        let data = vp
            .data()
            .chunks(d)
            .zip(vq.data().chunks(d))
            .map(|(rp, rq)| {
                rp.iter()
                    .zip(rq)
                    .map(|(&pi, &qi)| pi * (pi.max(lf).ln() - qi.max(lf).ln()))
                    .sum()
            })
            .collect();
        let out = Tensor::new(vp.leading_shape(), data)?;
        let rg = self.rg(&[p, q]);
        Ok(self.push(out, Op::KlLast { p, q, floor }, rg))
    }

    /// Backpropagates from a one-element `root`, adding into every reachable
    /// node's gradient buffer.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(GraphError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            tmp[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(gy) = tmp[i].take() else { continue };
            self.propagate(i, &gy, &mut tmp);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += g),
                slot @ None => *slot = Some(gy),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let n = self.nodes[id.0].value.numel();
            let slot = tmp[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        // Accumulates `gy * dy/dx` for a possibly broadcast operand.
        fn reduce_into(g: &mut [f64], contrib: impl Iterator<Item = f64>, scalar: bool) {
            if scalar {
                g[0] += contrib.sum::<f64>();
            } else {
                g.iter_mut().zip(contrib).for_each(|(a, c)| *a += c);
            }
        }
        let is_scalar_operand = |id: NodeId| self.nodes[id.0].value.rank() == 0 && y.len() != 1;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (sa, sb) = (is_scalar_operand(*a), is_scalar_operand(*b));
                acc(*a, &mut |g| reduce_into(g, gy.iter().copied(), sa));
                acc(*b, &mut |g| reduce_into(g, gy.iter().map(|v| sign * v), sb));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (sa, sb) = (is_scalar_operand(*a), is_scalar_operand(*b));
                let at = |k: usize| if sa { xa[0] } else { xa[k] };
                let bt = |k: usize| if sb { xb[0] } else { xb[k] };
                let div = matches!(node.op, Op::Div(..));
                acc(*a, &mut |g| {
                    let it = gy
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| if div { v / bt(k) } else { v * bt(k) });
                    reduce_into(g, it, sa)
                });
                acc(*b, &mut |g| {
                    let it = gy.iter().enumerate().map(|(k, &v)| {
                        if div {
                            -v * at(k) / (bt(k) * bt(k))
                        } else {
                            v * at(k)
                        }
                    });
                    reduce_into(g, it, sb)
                });
            }
            Op::Neg(x) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, v)| *a -= v)),
            Op::Scale(x, c) => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(a, v)| *a += c * v)
            }),
            Op::Offset(x) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, v)| *a += v)),
            Op::MaxScalar(x, c) => {
                let xs = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xs[k] > *c {
                            g[k] += gy[k];
                        }
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |g| {
                g.iter_mut()
                    .zip(gy)
                    .zip(y)
                    .for_each(|((a, v), e)| *a += v * e)
            }),
            Op::Log(x, floor) => {
                let xs = val(*x);
                let f = floor.unwrap_or(0.0);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xs[k] >= f {
                            g[k] += gy[k] / xs[k];
                        }
                    }
                })
            }
            Op::Relu(x) => {
                let xs = val(*x);
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xs[k] > 0.0 {
                            g[k] += gy[k];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] += gy[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::SoftmaxLast(x) => {
                let d = node.value.last_dim();
                acc(*x, &mut |g| {
                    for ((gr, yr), gyr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                        let s: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gr[k] += yr[k] * (gyr[k] - s);
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gy[0])),
            Op::Mean(x) => acc(*x, &mut |g| {
                let s = gy[0] / g.len() as f64;
                g.iter_mut().for_each(|a| *a += s)
            }),
            Op::SumLast(x) => {
                let d = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |g| {
                    for (row, &v) in g.chunks_mut(d).zip(gy) {
                        row.iter_mut().for_each(|a| *a += v);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a), val(*b));
                // dA = dY B^T
                acc(*a, &mut |g| {
                    for i in 0..n {
                        let gyr = &gy[i * m..(i + 1) * m];
                        let gr = &mut g[i * k..(i + 1) * k];
                        for (kk, gv) in gr.iter_mut().enumerate() {
                            let br = &xb[kk * m..(kk + 1) * m];
                            *gv += dot(gyr, br);
                        }
                    }
                });
                // dB = A^T dY
                acc(*b, &mut |g| {
                    for i in 0..n {
                        let ar = &xa[i * k..(i + 1) * k];
                        let gyr = &gy[i * m..(i + 1) * m];
                        for (kk, &av) in ar.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let gr = &mut g[kk * m..(kk + 1) * m];
                            for (gv, &v) in gr.iter_mut().zip(gyr) {
                                *gv += av * v;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, v)| *a += v));
                let d = self.nodes[b.0].value.numel();
                acc(*b, &mut |g| {
                    for row in gy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => {
                let geo = ConvGeometry::new(
                    self.nodes[input.0].value.shape(),
                    self.nodes[weight.0].value.shape(),
                    *pad,
                )
                .expect("validated at forward");
                let (xi, xw) = (val(*input), val(*weight));
                acc(*input, &mut |g| geo.backward_input(gy, xw, g));
                acc(*weight, &mut |g| geo.backward_weight(gy, xi, g));
                acc(*bias, &mut |g| {
                    let plane = geo.oh * geo.ow;
                    for (idx, chunk) in gy.chunks(plane).enumerate() {
                        g[idx % geo.o] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &mut |g| {
                for (&src, &v) in argmax.iter().zip(gy) {
                    g[src] += v;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, v)| *a += v)),
            Op::ConcatLast(a, b) => {
                let da = self.nodes[a.0].value.last_dim();
                let db = self.nodes[b.0].value.last_dim();
                acc(*a, &mut |g| {
                    for (gr, gyr) in g.chunks_mut(da).zip(gy.chunks(da + db)) {
                        gr.iter_mut().zip(&gyr[..da]).for_each(|(x, v)| *x += v);
                    }
                });
                acc(*b, &mut |g| {
                    for (gr, gyr) in g.chunks_mut(db).zip(gy.chunks(da + db)) {
                        gr.iter_mut().zip(&gyr[da..]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let per = gy.len() / rows.len().max(1);
                acc(*x, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut g[r * per..(r + 1) * per];
                        dst.iter_mut()
                            .zip(&gy[k * per..(k + 1) * per])
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::L2NormLast(x) => {
                let xs = val(*x);
                let d = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |g| {
                    for (r, (gr, xr)) in g.chunks_mut(d).zip(xs.chunks(d)).enumerate() {
                        if y[r] > 0.0 {
                            let s = gy[r] / y[r];
                            gr.iter_mut().zip(xr).for_each(|(a, v)| *a += s * v);
                        }
                    }
                })
            }
            Op::CosineLast(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let d = self.nodes[a.0].value.last_dim();
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                let grad_side = |g: &mut [f64], own: &[f64], other: &[f64]| {
                    for (r, ((gr, orow), trow)) in g
                        .chunks_mut(d)
                        .zip(own.chunks(d))
                        .zip(other.chunks(d))
                        .enumerate()
                    {
                        let no = norm(orow);
                        let nt = norm(trow);
                        let c = y[r];
                        for k in 0..d {
                            gr[k] += gy[r] * (trow[k] / (no * nt) - c * orow[k] / (no * no));
                        }
                    }
                };
                acc(*a, &mut |g| grad_side(g, xa, xb));
                acc(*b, &mut |g| grad_side(g, xb, xa));
            }
            Op::KlLast { p, q, floor } => {
                let (xp, xq) = (val(*p), val(*q));
                let d = self.nodes[p.0].value.last_dim();
                let f = floor.unwrap_or(0.0);
                acc(*p, &mut |g| {
                    for k in 0..g.len() {
                        let r = k / d;
                        let lp = xp[k].max(f).ln();
                        let lq = xq[k].max(f).ln();
                        let own = if xp[k] >= f { 1.0 } else { 0.0 };
                        g[k] += gy[r] * (lp - lq + own);
                    }
                });
                acc(*q, &mut |g| {
                    for k in 0..g.len() {
                        if xq[k] >= f {
                            g[k] -= gy[k / d] * xp[k] / xq[k];
                        }
                    }
                });
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, c2, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if c != c2 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    /// Output columns `ox` for which input column `ox + kj - pad` is in range.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.ow);
        (lo, hi.max(lo))
    }

    fn row_range(&self, ki: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ki);
        let hi = (self.h + self.pad).saturating_sub(ki).min(self.oh);
        (lo, hi.max(lo))
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.n * self.o * plane];
        for b in 0..self.n {
            for oc in 0..self.o {
                let dst = &mut out[(b * self.o + oc) * plane..(b * self.o + oc + 1) * plane];
                dst.iter_mut().for_each(|v| *v = bias[oc]);
                for ic in 0..self.c {
                    let src = &x[(b * self.c + ic) * self.h * self.w
                        ..(b * self.c + ic + 1) * self.h * self.w];
                    for ki in 0..self.kh {
                        let (ylo, yhi) = self.row_range(ki);
                        for kj in 0..self.kw {
                            let wv = wt[((oc * self.c + ic) * self.kh + ki) * self.kw + kj];
                            let (xlo, xhi) = self.col_range(kj);
                            for oy in ylo..yhi {
                                let iy = oy + ki - self.pad;
                                let srow = &src[iy * self.w..(iy + 1) * self.w];
                                let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                                for ox in xlo..xhi {
                                    drow[ox] += wv * srow[ox + kj - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, gy: &[f64], wt: &[f64], g: &mut [f64]) {
        let plane = self.oh * self.ow;
        for b in 0..self.n {
            for oc in 0..self.o {
                let gsrc = &gy[(b * self.o + oc) * plane..(b * self.o + oc + 1) * plane];
                for ic in 0..self.c {
                    let gdst = &mut g[(b * self.c + ic) * self.h * self.w
                        ..(b * self.c + ic + 1) * self.h * self.w];
                    for ki in 0..self.kh {
                        let (ylo, yhi) = self.row_range(ki);
                        for kj in 0..self.kw {
                            let wv = wt[((oc * self.c + ic) * self.kh + ki) * self.kw + kj];
                            let (xlo, xhi) = self.col_range(kj);
                            for oy in ylo..yhi {
                                let iy = oy + ki - self.pad;
                                for ox in xlo..xhi {
                                    gdst[iy * self.w + ox + kj - self.pad] +=
                                        wv * gsrc[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, gy: &[f64], x: &[f64], g: &mut [f64]) {
        let plane = self.oh * self.ow;
        for b in 0..self.n {
            for oc in 0..self.o {
                let gsrc = &gy[(b * self.o + oc) * plane..(b * self.o + oc + 1) * plane];
                for ic in 0..self.c {
                    let src = &x[(b * self.c + ic) * self.h * self.w
                        ..(b * self.c + ic + 1) * self.h * self.w];
                    for ki in 0..self.kh {
                        let (ylo, yhi) = self.row_range(ki);
                        for kj in 0..self.kw {
                            let (xlo, xhi) = self.col_range(kj);
                            let mut s = 0.0;
                            for oy in ylo..yhi {
                                let iy = oy + ki - self.pad;
                                for ox in xlo..xhi {
                                    s += gsrc[oy * self.ow + ox]
                                        * src[iy * self.w + ox + kj - self.pad];
                                }
                            }
                            g[((oc * self.c + ic) * self.kh + ki) * self.kw + kj] += s;
                        }
                    }
                }
            }
        }
    }
}
