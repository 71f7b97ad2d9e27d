//! Time-conditioned residual 1-D convolutional network.
//!
//! ```text
//! h = conv_in(x) + time_in(emb(t))
//! repeat blocks: h = h + conv2(silu(conv1(silu(h)) + time_b(emb(t))))
//! y = conv_out(silu(h))
//! ```
//!
//! Channels run over regions (`R`) at the boundary and `hidden` inside; the
//! time axis is kept at full resolution with same padding.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::{AutodiffError, Result};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub regions: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub time_embed_dim: usize,
    /// Multiplier applied to `t` before the sinusoidal features.
    pub time_scale: f64,
}

impl ArchSpec {
    /// Four residual blocks, kernel 5, 32 channels.
    pub fn standard(regions: usize) -> Self {
        Self { regions, hidden: 32, blocks: 4, kernel: 5, time_embed_dim: 32, time_scale: 100.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.regions >= 1
            && self.hidden >= 1
            && self.kernel % 2 == 1
            && self.time_embed_dim >= 2
            && self.time_embed_dim % 2 == 0
            && self.time_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::Architecture(format!("invalid architecture {self:?}")))
        }
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (r, h, k, e) = (self.regions, self.hidden, self.kernel, self.time_embed_dim);
        let mut v = vec![
            ("in.weight".to_string(), vec![h, r, k]),
            ("in.bias".to_string(), vec![h]),
            ("in.time.weight".to_string(), vec![e, h]),
            ("in.time.bias".to_string(), vec![h]),
        ];
        for b in 0..self.blocks {
            v.push((format!("block{b}.conv1.weight"), vec![h, h, k]));
            v.push((format!("block{b}.conv1.bias"), vec![h]));
            v.push((format!("block{b}.time.weight"), vec![e, h]));
            v.push((format!("block{b}.time.bias"), vec![h]));
            v.push((format!("block{b}.conv2.weight"), vec![h, h, k]));
            v.push((format!("block{b}.conv2.bias"), vec![h]));
        }
        v.push(("out.weight".to_string(), vec![r, h, k]));
        v.push(("out.bias".to_string(), vec![r]));
        v
    }
}

/// Named parameter arrays of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldParams {
    arch: ArchSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalLayerInit {
    Zero,
    FanIn,
}

impl VectorFieldParams {
    /// Fan-in scaled uniform weights; the output conv is zeroed unless
    /// `final_layer` asks otherwise.
    pub fn init(arch: ArchSpec, final_layer: FinalLayerInit, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in arch.layout() {
            let fan_in = if name.contains("time") {
                arch.time_embed_dim
            } else if name.starts_with("in.") {
                arch.regions * arch.kernel
            } else {
                arch.hidden * arch.kernel
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let zero = final_layer == FinalLayerInit::Zero && name.starts_with("out.");
            let n: usize = shape.iter().product();
            let data = if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { arch, names, tensors })
    }

    pub fn from_named(arch: ArchSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != named.len() {
            return Err(AutodiffError::Architecture(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((lname, lshape), (name, t)) in layout.into_iter().zip(named) {
            if lname != name || lshape != t.shape() {
                return Err(AutodiffError::Architecture(format!(
                    "parameter `{name}` {:?} does not match `{lname}` {lshape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(AutodiffError::Architecture(format!("parameter `{name}` is not finite")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { arch, names, tensors })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { ids: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Tape ids of a parameter set, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

/// Sinusoidal features `[cos(s t f_j), sin(s t f_j)]`, `f_j = 10000^(-j/half)`.
pub fn time_embedding(arch: &ArchSpec, ts: &[f64]) -> Tensor {
    let e = arch.time_embed_dim;
    let half = e / 2;
    let mut data = Vec::with_capacity(ts.len() * e);
    for &t in ts {
        let freqs = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| arch.time_scale * t * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(vec![ts.len(), e], data).expect("embedding shape")
}

/// Network forward pass on the tape; `x` is `[B, R, T]`, one `t` per row.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &VectorFieldParams,
    bound: &BoundParams,
    ts: &[f64],
    x: NodeId,
) -> Result<NodeId> {
    let arch = params.arch();
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 3 || xs[1] != arch.regions || xs[0] != ts.len() {
        return Err(AutodiffError::Architecture(format!(
            "input {xs:?} with {} times does not fit {} regions",
            ts.len(),
            arch.regions
        )));
    }
    let p = |i: usize| bound.ids[i];
    let emb = tape.leaf(time_embedding(arch, ts));
    let mut h = tape.conv1d(x, p(0), p(1))?;
    let tb = tape.linear(emb, p(2), p(3))?;
    h = tape.add_channel_bias(h, tb)?;
    for b in 0..arch.blocks {
        let base = 4 + 6 * b;
        let u = tape.silu(h);
        let u = tape.conv1d(u, p(base), p(base + 1))?;
        let tb = tape.linear(emb, p(base + 2), p(base + 3))?;
        let u = tape.add_channel_bias(u, tb)?;
        let u = tape.silu(u);
        let u = tape.conv1d(u, p(base + 4), p(base + 5))?;
        h = tape.add(h, u)?;
    }
    let last = 4 + 6 * arch.blocks;
    let h = tape.silu(h);
    tape.conv1d(h, p(last), p(last + 1))
}

/// Stack `T x R` matrices into a `[B, R, T]` tensor.
pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut count = 0;
    for w in windows {
        let d = w.dim();
        if *dims.get_or_insert(d) != d {
            return Err(AutodiffError::Shape(format!("window {d:?} differs from {dims:?}")));
        }
        for col in w.columns() {
            data.extend(col.iter());
        }
        count += 1;
    }
    let (t, r) = dims.unwrap_or((0, 0));
    Tensor::new(vec![count, r, t], data)
}

/// Split a `[B, R, T]` tensor back into `T x R` matrices.
pub fn unstack_windows(t: &Tensor) -> Vec<Array2<f64>> {
    let (b, r, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..b)
        .map(|i| {
            let block = &t.data()[i * r * n..(i + 1) * r * n];
            Array2::from_shape_fn((n, r), |(tt, c)| block[c * n + tt])
        })
        .collect()
}

/// Batched inference: one output `T x R` matrix per input window.
pub fn forward_batch(params: &VectorFieldParams, ts: &[f64], xs: &[&Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(stack_windows(xs.iter().copied())?);
    let y = forward_on_tape(&mut tape, params, &bound, ts, x)?;
    Ok(unstack_windows(tape.value(y)))
}

/// `net(t, x)` for one `T x R` window.
pub fn net_forward(params: &VectorFieldParams, t: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AutodiffError::Architecture(format!("time {t} outside [0, 1]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AutodiffError::Architecture("input is not finite".into()));
    }
    Ok(forward_batch(params, &[t], &[x])?.remove(0))
}
