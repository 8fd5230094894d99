//! Reverse-mode differentiation over a fixed vocabulary of layers.
//!
//! A [`Graph`] records a forward pass node by node. Every node stores its
//! value and the op that produced it; [`Graph::backward`] walks the nodes in
//! reverse and accumulates parameter gradients into a [`ParamStore`].
//! Supported ops: convolution, dense affine, per-channel scale-shift, gated
//! multiply, 2x mean-pool and its nearest-neighbour adjoint, channel concat,
//! dropout masks, elementwise arithmetic, fixed linear maps (projectors),
//! learnable row filters and L1/L2 losses.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::conv::{conv2d, conv2d_backward, gemm};
use crate::numerics::filter::RowFilter;
use crate::numerics::{ParamStore, Tensor};

/// A fixed linear operator usable inside a graph. Inputs and outputs carry a
/// leading batch axis that the operator maps item by item.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &str;
    /// Shape of one input item.
    fn in_shape(&self) -> Vec<usize>;
    /// Shape of one output item.
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_transpose(&self, y: &[f64], out: &mut [f64]);
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Input,
    Param(String),
    Conv2d { x: Var, k: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    ScaleShift { x: Var, scale: Var, shift: Var },
    Gate { x: Var },
    MeanPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Reshape { x: Var },
    Mask { x: Var, mask: Arc<Tensor> },
    Sum { x: Var },
    L1 { a: Var, b: Var },
    Mse { a: Var, b: Var },
    Map { x: Var, map: Arc<dyn LinearMap> },
    RowFilter { x: Var, g: Var, filter: Arc<RowFilter>, response: Arc<Vec<f64>> },
    External { name: String, parents: Vec<Var> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Gate { .. } => "gate",
            Op::MeanPool2 { .. } => "mean_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Mask { .. } => "mask",
            Op::Sum { .. } => "sum",
            Op::L1 { .. } => "l1_loss",
            Op::Mse { .. } => "mse_loss",
            Op::Map { map, .. } => map.name(),
            Op::RowFilter { .. } => "row_filter",
            Op::External { name, .. } => name,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, k, b } | Op::Linear { x, w: k, b } => {
                let mut v = vec![*x, *k];
                v.extend(b);
                v
            }
            Op::ScaleShift { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Gate { x }
            | Op::MeanPool2 { x }
            | Op::Upsample2 { x }
            | Op::Scale { x, .. }
            | Op::Reshape { x }
            | Op::Mask { x, .. }
            | Op::Sum { x }
            | Op::Map { x, .. } => vec![*x],
            Op::Concat { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::L1 { a, b }
            | Op::Mse { a, b } => vec![*a, *b],
            Op::RowFilter { x, g, .. } => vec![*x, *g],
            Op::External { parents, .. } => parents.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    // (batch, channels, inner) for [B, C, ...] tensors
    if shape.len() < 2 {
        return shape_err(format!("expected [B, C, ...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.value(name)?.clone();
        Ok(self.push(t, Op::Param(name.to_string())))
    }

    /// Records a value computed outside the layer vocabulary. It behaves as
    /// a constant in the forward pass; `backward` fails if a gradient has to
    /// flow through it into a trainable parent.
    pub fn external(&mut self, name: &str, value: Tensor, parents: &[Var]) -> Var {
        self.push(
            value,
            Op::External {
                name: name.to_string(),
                parents: parents.to_vec(),
            },
        )
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Conv2d { x, k, b }))
    }

    /// Dense affine map `x W^T + b` for `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[bsz, din], &[dout, win]) = (xv.shape(), wv.shape()) else {
            return shape_err(format!("linear expects [B,in] x [out,in], got {:?} x {:?}", xv.shape(), wv.shape()));
        };
        if din != win {
            return shape_err(format!("linear input width {din} vs weight {win}"));
        }
        let mut out = vec![0.0; bsz * dout];
        gemm(bsz, din, dout, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return shape_err(format!("linear bias must be [{dout}]"));
            }
            for row in out.chunks_mut(dout) {
                for (o, &c) in row.iter_mut().zip(bv.data()) {
                    *o += c;
                }
            }
        }
        let y = Tensor::new(vec![bsz, dout], out)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// `x * (1 + scale) + shift` with per-(batch, channel) `scale`/`shift`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, inner) = channel_split(xv.shape())?;
        for v in [scale, shift] {
            if self.value(v).shape() != [b, c] {
                return shape_err(format!(
                    "scale_shift modulation must be [{b}, {c}], got {:?}",
                    self.value(v).shape()
                ));
            }
        }
        let (s, h) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xv.data().to_vec();
        for (bc, chunk) in out.chunks_mut(inner).enumerate() {
            let (sc, sh) = (1.0 + s[bc], h[bc]);
            for v in chunk {
                *v = *v * sc + sh;
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(y, Op::ScaleShift { x, scale, shift }))
    }

    /// Splits the channel axis in half and multiplies the halves.
    pub fn gate(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, inner) = channel_split(xv.shape())?;
        if c % 2 != 0 {
            return shape_err(format!("gate needs an even channel count, got {c}"));
        }
        let half = c / 2;
        let mut out = Vec::with_capacity(b * half * inner);
        for bi in 0..b {
            let base = bi * c * inner;
            let d = xv.data();
            for i in 0..half * inner {
                out.push(d[base + i] * d[base + half * inner + i]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = half;
        let y = Tensor::new(shape, out)?;
        Ok(self.push(y, Op::Gate { x }))
    }

    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, c, h, w] = xv.shape() else {
            return shape_err("mean_pool2 expects [B,C,H,W]");
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("mean_pool2 needs even spatial size, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let y = Tensor::from_fn(&[b, c, ho, wo], |i| {
            let (bc, r) = (i / (ho * wo), i % (ho * wo));
            let (y, x) = (r / wo, r % wo);
            let p = bc * h * w + 2 * y * w + 2 * x;
            0.25 * (d[p] + d[p + 1] + d[p + w] + d[p + w + 1])
        });
        Ok(self.push(y, Op::MeanPool2 { x }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, c, h, w] = xv.shape() else {
            return shape_err("upsample2 expects [B,C,H,W]");
        };
        let d = xv.data();
        let y = Tensor::from_fn(&[b, c, 2 * h, 2 * w], |i| {
            let (bc, r) = (i / (4 * h * w), i % (4 * h * w));
            let (yy, xx) = (r / (2 * w), r % (2 * w));
            d[bc * h * w + (yy / 2) * w + xx / 2]
        });
        Ok(self.push(y, Op::Upsample2 { x }))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ba, ca, ia) = channel_split(av.shape())?;
        let (bb, cb, ib) = channel_split(bv.shape())?;
        if ba != bb || ia != ib || av.shape()[2..] != bv.shape()[2..] {
            return shape_err(format!("concat {:?} with {:?}", av.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..ba {
            out.extend_from_slice(&av.data()[i * ca * ia..(i + 1) * ca * ia]);
            out.extend_from_slice(&bv.data()[i * cb * ib..(i + 1) * cb * ib]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let y = Tensor::new(shape, out)?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale { x, s })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Inverted dropout with keep-probability `1 - p`. `p == 0` is a no-op.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("dropout probability {p} outside [0, 1)"));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(x).shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let y = self.value(x).mul(&mask)?;
        Ok(self.push(y, Op::Mask { x, mask: Arc::new(mask) }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let y = Tensor::scalar(d.norm_l1() / d.len().max(1) as f64);
        Ok(self.push(y, Op::L1 { a, b }))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let y = Tensor::scalar(d.data().iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64);
        Ok(self.push(y, Op::Mse { a, b }))
    }

    /// Applies a fixed linear operator to every item of a batch.
    pub fn map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let xv = self.value(x);
        let ins = map.in_shape();
        let n_in: usize = ins.iter().product();
        if xv.ndim() != ins.len() + 1 || xv.shape()[1..] != ins[..] {
            return shape_err(format!(
                "{} expects [B, {:?}], got {:?}",
                map.name(),
                ins,
                xv.shape()
            ));
        }
        let outs = map.out_shape();
        let n_out: usize = outs.iter().product();
        let b = xv.shape()[0];
        let mut out = vec![0.0; b * n_out];
        for (src, dst) in xv.data().chunks(n_in).zip(out.chunks_mut(n_out)) {
            map.apply(src, dst);
        }
        let mut shape = vec![b];
        shape.extend(outs);
        let y = Tensor::new(shape, out)?;
        Ok(self.push(y, Op::Map { x, map }))
    }

    /// Filters the last axis of `x` with `filter`, modulated by the log-gains
    /// held in `g`.
    pub fn row_filter(&mut self, x: Var, g: Var, filter: Arc<RowFilter>) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if xv.shape().last() != Some(&filter.width()) {
            return shape_err(format!("row_filter width {} vs input {:?}", filter.width(), xv.shape()));
        }
        if gv.shape() != [filter.num_bins()] {
            return shape_err(format!("row_filter gains must be [{}]", filter.num_bins()));
        }
        let response = Arc::new(filter.response(Some(gv.data())));
        let y = Tensor::new(xv.shape().to_vec(), filter.apply(xv.data(), &response)?)?;
        Ok(self.push(y, Op::RowFilter { x, g, filter, response }))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients to
    /// `store` and returning the gradient of every node that needed one.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.local_grads(&node.op, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            if let Op::Param(name) = &node.op {
                store.accumulate_grad(name, &g)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match op {
            Op::Input | Op::Param(_) => vec![],
            Op::External { name, parents } => {
                if parents.iter().any(|&p| self.needs(p)) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
                vec![]
            }
            Op::Conv2d { x, k, b } => {
                let cg = conv2d_backward(val(*x), val(*k), g)?;
                let mut v = vec![(*x, cg.input), (*k, cg.kernel)];
                if let Some(b) = b {
                    v.push((*b, cg.bias));
                }
                v
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                let mut gx = vec![0.0; bsz * din];
                gemm(bsz, dout, din, g.data(), false, wv.data(), false, &mut gx, false);
                let mut gw = vec![0.0; dout * din];
                gemm(dout, bsz, din, g.data(), true, xv.data(), false, &mut gw, false);
                let mut v = vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), gw)?),
                ];
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (a, &r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    v.push((*b, Tensor::from_vec(gb)));
                }
                v
            }
            Op::ScaleShift { x, scale, shift } => {
                let xv = val(*x);
                let (_, _, inner) = channel_split(xv.shape())?;
                let s = val(*scale).data();
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; s.len()];
                let mut gh = vec![0.0; s.len()];
                for (bc, (gchunk, xchunk)) in gx.chunks_mut(inner).zip(xv.data().chunks(inner)).enumerate() {
                    let mut acc_s = 0.0;
                    let mut acc_h = 0.0;
                    for (gv, &xvv) in gchunk.iter_mut().zip(xchunk) {
                        acc_s += *gv * xvv;
                        acc_h += *gv;
                        *gv *= 1.0 + s[bc];
                    }
                    gs[bc] = acc_s;
                    gh[bc] = acc_h;
                }
                let sshape = val(*scale).shape().to_vec();
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*scale, Tensor::new(sshape.clone(), gs)?),
                    (*shift, Tensor::new(sshape, gh)?),
                ]
            }
            Op::Gate { x } => {
                let xv = val(*x);
                let (b, c, inner) = channel_split(xv.shape())?;
                let half = c / 2;
                let d = xv.data();
                let mut gx = vec![0.0; xv.len()];
                for bi in 0..b {
                    let base = bi * c * inner;
                    let gbase = bi * half * inner;
                    for i in 0..half * inner {
                        let gv = g.data()[gbase + i];
                        gx[base + i] = gv * d[base + half * inner + i];
                        gx[base + half * inner + i] = gv * d[base + i];
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
            }
            Op::MeanPool2 { x } => {
                let xv = val(*x);
                let &[_, _, h, w] = xv.shape() else { unreachable!() };
                let (ho, wo) = (h / 2, w / 2);
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    let (bc, r) = (i / (h * w), i % (h * w));
                    let (y, xx) = (r / w, r % w);
                    0.25 * g.data()[bc * ho * wo + (y / 2) * wo + xx / 2]
                });
                vec![(*x, gx)]
            }
            Op::Upsample2 { x } => {
                let xv = val(*x);
                let &[_, _, h, w] = xv.shape() else { unreachable!() };
                let gd = g.data();
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    let (bc, r) = (i / (h * w), i % (h * w));
                    let (y, xx) = (r / w, r % w);
                    let p = bc * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                    gd[p] + gd[p + 1] + gd[p + 2 * w] + gd[p + 2 * w + 1]
                });
                vec![(*x, gx)]
            }
            Op::Concat { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bsz, ca, inner) = channel_split(av.shape())?;
                let cb = bv.shape()[1];
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for i in 0..bsz {
                    let base = i * (ca + cb) * inner;
                    ga.extend_from_slice(&g.data()[base..base + ca * inner]);
                    gb.extend_from_slice(&g.data()[base + ca * inner..base + (ca + cb) * inner]);
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul { a, b } => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale { x, s } => vec![(*x, g.scale(*s))],
            Op::Reshape { x } => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Mask { x, mask } => vec![(*x, g.mul(mask)?)],
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::L1 { a, b } => {
                let n = val(*a).len().max(1) as f64;
                let s = g.item() / n;
                let d = val(*a).zip_map(val(*b), |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                })?;
                vec![(*a, d.clone()), (*b, d.scale(-1.0))]
            }
            Op::Mse { a, b } => {
                let n = val(*a).len().max(1) as f64;
                let d = val(*a).sub(val(*b))?.scale(2.0 * g.item() / n);
                vec![(*a, d.clone()), (*b, d.scale(-1.0))]
            }
            Op::Map { x, map } => {
                if !self.needs(*x) {
                    vec![]
                } else {
                    let xv = val(*x);
                    let n_in: usize = map.in_shape().iter().product();
                    let n_out: usize = map.out_shape().iter().product();
                    let mut gx = vec![0.0; xv.len()];
                    for (gy, dst) in g.data().chunks(n_out).zip(gx.chunks_mut(n_in)) {
                        map.apply_transpose(gy, dst);
                    }
                    vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
                }
            }
            Op::RowFilter { x, g: gains, filter, response } => {
                let xv = val(*x);
                let mut v = Vec::new();
                if self.needs(*x) {
                    // even real response: the padded filter is self-adjoint
                    let gx = filter.apply(g.data(), response)?;
                    v.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if self.needs(*gains) {
                    let gg = filter.grad_log_gains(xv.data(), g.data(), response);
                    v.push((*gains, Tensor::from_vec(gg)));
                }
                v
            }
        })
    }
}

/// Human-readable names of the ops recorded in a graph (diagnostics).
pub fn op_names(graph: &Graph) -> Vec<String> {
    graph.nodes.iter().map(|n| n.op.name().to_string()).collect()
}
