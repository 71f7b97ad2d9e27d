//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Every primitive appends a node holding its input ids and its forward
//! value. Node ids are handed out in insertion order, so the tape is acyclic
//! by construction and insertion order is a topological order; `backward`
//! simply walks it in reverse.

use super::tensor::Tensor;
use super::{AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Conv1d,
    AddChannelBias,
    Linear,
    Sum,
    Mean,
    Mse,
    Rcl,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    AddChannelBias { x: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    Rcl(NodeId, NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Silu(..) => OpKind::Silu,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Mse(..) => OpKind::Mse,
            Op::Rcl(..) => OpKind::Rcl,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sign_fault: Option<OpKind>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shape_err(op: &str, msg: String) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: {msg}"))
}

/// Per-row Pearson statistics used by the residual-correlation op.
pub(crate) struct RowCorrelation {
    pub loss: f64,
    /// `d loss / d p` and `d loss / d q` for this row; `None` when the row
    /// is degenerate and contributes no gradient.
    pub grads: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) fn row_correlation(p: &[f64], q: &[f64], with_grad: bool) -> RowCorrelation {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let pc: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let qc: Vec<f64> = q.iter().map(|v| v - mq).collect();
    let vp: f64 = pc.iter().map(|v| v * v).sum();
    let vq: f64 = qc.iter().map(|v| v * v).sum();
    if vp == 0.0 && vq == 0.0 {
        return RowCorrelation { loss: 0.0, grads: None };
    }
    if vp == 0.0 || vq == 0.0 {
        return RowCorrelation { loss: 1.0, grads: None };
    }
    let cov: f64 = pc.iter().zip(&qc).map(|(a, b)| a * b).sum();
    let norm = (vp * vq).sqrt();
    let r = cov / norm;
    let grads = with_grad.then(|| {
        let gp = pc.iter().zip(&qc).map(|(a, b)| -(b / norm - r * a / vp)).collect();
        let gq = pc.iter().zip(&qc).map(|(a, b)| -(a / norm - r * b / vq)).collect();
        (gp, gq)
    });
    RowCorrelation { loss: 1.0 - r, grads }
}

/// `out[b,o,t] = bias[o] + sum_{i,k} w[o,i,k] * x[b,i,t+k-pad]`, zero padded.
fn conv1d_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (bsz, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; bsz * cout * t];
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    for b in 0..bsz {
        for o in 0..cout {
            let orow = &mut out[(b * cout + o) * t..(b * cout + o + 1) * t];
            orow.iter_mut().for_each(|v| *v = bd[o]);
            for i in 0..cin {
                let xrow = &xd[(b * cin + i) * t..(b * cin + i + 1) * t];
                for kk in 0..k {
                    let wv = wd[(o * cin + i) * k + kk];
                    let shift = kk as isize - pad;
                    let lo = (-shift).max(0) as usize;
                    let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (ov, xv) in orow[lo..hi].iter_mut().zip(xs) {
                        *ov += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, cout, t], out).expect("conv output shape")
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bsz, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; cout];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for b in 0..bsz {
        for o in 0..cout {
            let grow = &gd[(b * cout + o) * t..(b * cout + o + 1) * t];
            gb[o] += grow.iter().sum::<f64>();
            for i in 0..cin {
                let xoff = (b * cin + i) * t;
                for kk in 0..k {
                    let widx = (o * cin + i) * k + kk;
                    let wv = wd[widx];
                    let shift = kk as isize - pad;
                    let lo = (-shift).max(0) as usize;
                    let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let xlo = xoff + (lo as isize + shift) as usize;
                    let xhi = xoff + (hi as isize + shift) as usize;
                    let xs = &xd[xlo..xhi];
                    let gs = &grow[lo..hi];
                    gw[widx] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    for (gxv, gv) in gx[xlo..xhi].iter_mut().zip(gs) {
                        *gxv += wv * gv;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![cout], gb).expect("shape"),
    )
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fault injection for negative-control gradient checks: every adjoint
    /// contribution of `kind` is sign-flipped during `backward`.
    pub fn with_sign_fault(kind: OpKind) -> Self {
        Self { nodes: Vec::new(), sign_fault: Some(kind) }
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

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map(self.value(a), |x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * sigmoid(x));
        self.push(Op::Silu(a), v)
    }

    /// Same-padded 1-D convolution of `x: [B, Cin, T]` with `w: [Cout, Cin, K]`
    /// (K odd) and `b: [Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(shape_err("conv1d", format!("ranks x{xs:?} w{ws:?} b{bs:?}")));
        }
        if xs[1] != ws[1] || ws[0] != bs[0] || ws[2] % 2 == 0 {
            return Err(shape_err("conv1d", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let v = conv1d_forward(self.value(x), self.value(w), self.value(b));
        Ok(self.push(Op::Conv1d { x, w, b }, v))
    }

    /// `x: [B, C, T] + b: [B, C]` broadcast along time.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.len() != 3 || bs != [xs[0], xs[1]] {
            return Err(shape_err("add_channel_bias", format!("x{xs:?} b{bs:?}")));
        }
        let t = xs[2];
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (row, bv) in v.data_mut().chunks_mut(t).zip(bd) {
            row.iter_mut().for_each(|e| *e += bv);
        }
        Ok(self.push(Op::AddChannelBias { x, b }, v))
    }

    /// `x: [B, In] @ w: [In, Out] + b: [Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err("linear", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let (bsz, nin, nout) = (xs[0], ws[0], ws[1]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * nout];
        for r in 0..bsz {
            let orow = &mut out[r * nout..(r + 1) * nout];
            orow.copy_from_slice(bd);
            for i in 0..nin {
                let xv = xd[r * nin + i];
                for (ov, wv) in orow.iter_mut().zip(&wd[i * nout..(i + 1) * nout]) {
                    *ov += xv * wv;
                }
            }
        }
        let v = Tensor::new(vec![bsz, nout], out)?;
        Ok(self.push(Op::Linear { x, w, b }, v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let v = Tensor::scalar(s / ta.numel() as f64);
        Ok(self.push(Op::Mse(a, b), v))
    }

    /// Mean over the leading axis of `1 - pearson(p[b], q[b])`, each row
    /// flattened. A row where both residuals are constant contributes 0; a
    /// row where exactly one is constant contributes 1. Neither carries
    /// gradient.
    pub fn rcl(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        self.same_shape("rcl", p, q)?;
        let tp = self.value(p);
        let rows = tp.shape()[0];
        let n = tp.numel() / rows.max(1);
        if rows == 0 || n < 2 {
            return Err(shape_err("rcl", format!("need rows of length >= 2, got {:?}", tp.shape())));
        }
        let tq = self.value(q);
        let total: f64 = tp
            .data()
            .chunks(n)
            .zip(tq.data().chunks(n))
            .map(|(a, b)| row_correlation(a, b, false).loss)
            .sum();
        let v = Tensor::scalar(total / rows as f64);
        Ok(self.push(Op::Rcl(p, q), v))
    }

    /// Index of the first node holding a non-finite value, with its op.
    pub fn first_non_finite(&self) -> Option<(NodeId, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (NodeId(i), n.op.kind()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some((id, op)) => Err(AutodiffError::NonFinite { op, node: id.0 }),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let flip = self.sign_fault == Some(node.op.kind());
            let mut contribs: Vec<(NodeId, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, map(&g, |v| -v)));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    contribs.push((*a, zip_map(&g, self.value(*b), |x, y| x * y)));
                    contribs.push((*b, zip_map(&g, self.value(*a), |x, y| x * y)));
                }
                Op::Scale(a, c) => contribs.push((*a, map(&g, |v| c * v))),
                Op::Silu(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    });
                    contribs.push((*a, d));
                }
                Op::Conv1d { x, w, b } => {
                    let (gx, gw, gb) = conv1d_backward(self.value(*x), self.value(*w), &g);
                    contribs.push((*x, gx));
                    contribs.push((*w, gw));
                    contribs.push((*b, gb));
                }
                Op::AddChannelBias { x, b } => {
                    let t = g.shape()[2];
                    let gb: Vec<f64> = g.data().chunks(t).map(|r| r.iter().sum()).collect();
                    contribs.push((*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?));
                    contribs.push((*x, g));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (bsz, nin, nout) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                    let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                    let mut gx = vec![0.0; bsz * nin];
                    let mut gw = vec![0.0; nin * nout];
                    let mut gb = vec![0.0; nout];
                    for r in 0..bsz {
                        let grow = &gd[r * nout..(r + 1) * nout];
                        for (a, v) in gb.iter_mut().zip(grow) {
                            *a += v;
                        }
                        for i in 0..nin {
                            let wrow = &wd[i * nout..(i + 1) * nout];
                            gx[r * nin + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            let xv = xd[r * nin + i];
                            for (a, v) in gw[i * nout..(i + 1) * nout].iter_mut().zip(grow) {
                                *a += xv * v;
                            }
                        }
                    }
                    contribs.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                    contribs.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                    contribs.push((*b, Tensor::new(vec![nout], gb)?));
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    contribs.push((*a, map(self.value(*a), |_| gv)));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = g.item()? / av.numel() as f64;
                    contribs.push((*a, map(av, |_| gv)));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = 2.0 * g.item()? / av.numel() as f64;
                    let da = zip_map(av, bv, |x, y| c * (x - y));
                    contribs.push((*b, map(&da, |v| -v)));
                    contribs.push((*a, da));
                }
                Op::Rcl(p, q) => {
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    let rows = pv.shape()[0];
                    let n = pv.numel() / rows;
                    let scale = g.item()? / rows as f64;
                    let mut gp = vec![0.0; pv.numel()];
                    let mut gq = vec![0.0; qv.numel()];
                    for r in 0..rows {
                        let span = r * n..(r + 1) * n;
                        let rc = row_correlation(&pv.data()[span.clone()], &qv.data()[span.clone()], true);
                        if let Some((dp, dq)) = rc.grads {
                            for (a, v) in gp[span.clone()].iter_mut().zip(dp) {
                                *a = scale * v;
                            }
                            for (a, v) in gq[span].iter_mut().zip(dq) {
                                *a = scale * v;
                            }
                        }
                    }
                    contribs.push((*p, Tensor::new(pv.shape().to_vec(), gp)?));
                    contribs.push((*q, Tensor::new(qv.shape().to_vec(), gq)?));
                }
            }
            for (target, mut c) in contribs {
                if flip {
                    c.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut grads[target.0], c);
            }
        }
        Ok(Gradients { grads })
    }
}
