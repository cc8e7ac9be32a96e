//! Reverse-mode automatic differentiation over 4-D tensors.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the nodes in reverse and accumulates exact gradients for every leaf
//! registered with [`Tape::param`]. Leaves can borrow their tensors, so
//! model parameters are never copied onto the tape. The op set is exactly
//! what the gated U-Net denoiser and the masked losses need; the saved
//! state for the backward pass is the node values themselves.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::{FrameMask, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<'a, T> Value<'a, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    StopGrad,
    /// Same-padded 2-D convolution, odd kernels, stride 1 or 2 with ceil
    /// output size.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    /// Nearest-neighbor upsampling to the recorded output size.
    Upsample {
        x: NodeId,
    },
    /// Average over bins and valid frames, per (batch, channel).
    MaskedPool {
        x: NodeId,
        mask: FrameMask,
    },
    /// [B, C, 1, 1] broadcast over the recorded output plane.
    Broadcast {
        x: NodeId,
    },
    ConcatC {
        parts: Vec<NodeId>,
    },
    Sigmoid {
        x: NodeId,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// x + v with v of shape [B, C, 1, 1] broadcast over bins and frames.
    AddBias {
        x: NodeId,
        v: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    /// ca * a + cb * b.
    Affine {
        a: NodeId,
        b: NodeId,
        ca: T,
        cb: T,
    },
    /// Zero all entries on padded frames.
    ZeroPad {
        x: NodeId,
        mask: FrameMask,
    },
    /// Masked squared-error sum reduced to a [1,1,1,1] scalar.
    SqSum {
        a: NodeId,
        b: NodeId,
        mask: FrameMask,
    },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients indexed by node, produced by [`Tape::backward`].
pub struct Gradients<T> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.inner[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inner[id.0].as_ref()
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.get()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.needs(id))
    }

    /// Trainable leaf borrowing its tensor (parameters).
    pub fn param(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowing its tensor (inputs, conditions).
    pub fn input(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf owning its tensor (values built during forward).
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Identity forward; the backward pass treats the value as a constant.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, CoreError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if stride != 1 && stride != 2 {
            return Err(CoreError::InvalidArgument(
                "conv stride must be 1 or 2".into(),
            ));
        }
        if ws.h % 2 == 0 || ws.w % 2 == 0 {
            return Err(CoreError::InvalidArgument(
                "conv kernels must be odd".into(),
            ));
        }
        if ws.c != xs.c {
            return Err(CoreError::ShapeMismatch {
                what: "conv input channels",
            });
        }
        if bs.b != 1 || bs.c != ws.b || bs.h != 1 || bs.w != 1 {
            return Err(CoreError::ShapeMismatch { what: "conv bias" });
        }
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride);
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, needs))
    }

    pub fn upsample_to(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, CoreError> {
        let xs = self.shape(x);
        if h > 2 * xs.h || w > 2 * xs.w || h < xs.h || w < xs.w {
            return Err(CoreError::InvalidArgument(
                "upsample target must be between 1x and 2x the input".into(),
            ));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(Shape::new(xs.b, xs.c, h, w));
        for b in 0..xs.b {
            for c in 0..xs.c {
                let src = xv.plane(b, c);
                let dst_w = w;
                let dst = out.plane_mut(b, c);
                for oh in 0..h {
                    let src_row = (oh / 2) * xs.w;
                    for ow in 0..dst_w {
                        dst[oh * dst_w + ow] = src[src_row + ow / 2];
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample { x }, needs))
    }

    pub fn masked_pool(&mut self, x: NodeId, mask: &FrameMask) -> Result<NodeId, CoreError> {
        let xs = self.shape(x);
        if xs.b != mask.batch() || xs.w != mask.frames() {
            return Err(CoreError::ShapeMismatch {
                what: "masked pool mask",
            });
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(Shape::new(xs.b, xs.c, 1, 1));
        for b in 0..xs.b {
            let len = mask.len_of(b);
            let denom = T::from_f64((xs.h * len) as f64);
            for c in 0..xs.c {
                let plane = xv.plane(b, c);
                let mut acc = T::zero();
                for h in 0..xs.h {
                    for v in &plane[h * xs.w..h * xs.w + len] {
                        acc += *v;
                    }
                }
                out.set(b, c, 0, 0, acc / denom);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::MaskedPool {
                x,
                mask: mask.clone(),
            },
            needs,
        ))
    }

    pub fn broadcast_to(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, CoreError> {
        let xs = self.shape(x);
        if xs.h != 1 || xs.w != 1 {
            return Err(CoreError::ShapeMismatch {
                what: "broadcast input must be [B, C, 1, 1]",
            });
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(Shape::new(xs.b, xs.c, h, w));
        for b in 0..xs.b {
            for c in 0..xs.c {
                let v = xv.at(b, c, 0, 0);
                for o in out.plane_mut(b, c) {
                    *o = v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Broadcast { x }, needs))
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> Result<NodeId, CoreError> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat needs inputs".into()));
        }
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.b, s.h, s.w) != (first.b, first.h, first.w) {
                return Err(CoreError::ShapeMismatch {
                    what: "concat spatial dims",
                });
            }
            channels += s.c;
        }
        let mut out = Tensor::zeros(Shape::new(first.b, channels, first.h, first.w));
        let mut base = 0;
        for &p in parts {
            let pc = self.shape(p).c;
            for b in 0..first.b {
                for c in 0..pc {
                    let src = self.value(p).plane(b, c).to_vec();
                    out.plane_mut(b, base + c).copy_from_slice(&src);
                }
            }
            base += pc;
        }
        let needs = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * sigmoid_scalar(v));
        let needs = self.needs(x);
        self.push(out, Op::Silu { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                what: "add operands",
            });
        }
        let out = self.value(a).add_scaled(self.value(b), T::one())?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn add_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, CoreError> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        if vs.b != xs.b || vs.c != xs.c || vs.h != 1 || vs.w != 1 {
            return Err(CoreError::ShapeMismatch {
                what: "bias must be [B, C, 1, 1]",
            });
        }
        let mut out = self.value(x).clone();
        for b in 0..xs.b {
            for c in 0..xs.c {
                let add = self.value(v).at(b, c, 0, 0);
                for o in out.plane_mut(b, c) {
                    *o = *o + add;
                }
            }
        }
        let needs = self.any_grad(&[x, v]);
        Ok(self.push(out, Op::AddBias { x, v }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                what: "mul operands",
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| c * v);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn affine(&mut self, a: NodeId, b: NodeId, ca: T, cb: T) -> Result<NodeId, CoreError> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                what: "affine operands",
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Affine { a, b, ca, cb }, needs))
    }

    pub fn zero_pad(&mut self, x: NodeId, mask: &FrameMask) -> Result<NodeId, CoreError> {
        let xs = self.shape(x);
        if xs.b != mask.batch() || xs.w != mask.frames() {
            return Err(CoreError::ShapeMismatch {
                what: "zero-pad mask",
            });
        }
        let mut out = self.value(x).clone();
        mask.zero_padding(&mut out);
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::ZeroPad {
                x,
                mask: mask.clone(),
            },
            needs,
        ))
    }

    /// Masked sum of squared differences over valid frames, all channels and
    /// bins; accumulated per item then combined in batch order so split and
    /// whole-batch evaluations agree bitwise.
    pub fn sq_sum(&mut self, a: NodeId, b: NodeId, mask: &FrameMask) -> Result<NodeId, CoreError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                what: "squared-sum operands",
            });
        }
        if sa.b != mask.batch() || sa.w != mask.frames() {
            return Err(CoreError::ShapeMismatch {
                what: "squared-sum mask",
            });
        }
        let total = masked_sq_sum(self.value(a), self.value(b), mask);
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![total])?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::SqSum {
                a,
                b,
                mask: mask.clone(),
            },
            needs,
        ))
    }

    /// Reverse pass from `loss` (a [1,1,1,1] node) seeded with `seed`.
    pub fn backward(&self, loss: NodeId, seed: T) -> Result<Gradients<T>, CoreError> {
        if self.shape(loss).len() != 1 {
            return Err(CoreError::InvalidArgument(
                "backward starts from a scalar node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![seed])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue; // leaf gradients stay in place for extraction
            }
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Conv2d { x, w, b, stride } => {
                    if self.needs(*x) {
                        let gx = grad_buf(&mut grads, *x, self.shape(*x));
                        conv2d_backward_input(gx, &gy, self.value(*w), *stride);
                    }
                    if self.needs(*w) {
                        let gw = grad_buf(&mut grads, *w, self.shape(*w));
                        conv2d_backward_weight(gw, &gy, self.value(*x), *stride);
                    }
                    if self.needs(*b) {
                        let gys = gy.shape();
                        let gb = grad_buf(&mut grads, *b, self.shape(*b));
                        for bb in 0..gys.b {
                            for co in 0..gys.c {
                                let mut acc = T::zero();
                                for v in gy.plane(bb, co) {
                                    acc += *v;
                                }
                                let i = gb.idx(0, co, 0, 0);
                                gb.data_mut()[i] += acc;
                            }
                        }
                    }
                }
                Op::Upsample { x } => {
                    let xs = self.shape(*x);
                    let gys = gy.shape();
                    let gx = grad_buf(&mut grads, *x, xs);
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            let src = gy.plane(b, c);
                            let dst = gx.plane_mut(b, c);
                            for oh in 0..gys.h {
                                let drow = (oh / 2) * xs.w;
                                for ow in 0..gys.w {
                                    dst[drow + ow / 2] += src[oh * gys.w + ow];
                                }
                            }
                        }
                    }
                }
                Op::MaskedPool { x, mask } => {
                    let xs = self.shape(*x);
                    let gx = grad_buf(&mut grads, *x, xs);
                    for b in 0..xs.b {
                        let len = mask.len_of(b);
                        let denom = T::from_f64((xs.h * len) as f64);
                        for c in 0..xs.c {
                            let g = gy.at(b, c, 0, 0) / denom;
                            let plane = gx.plane_mut(b, c);
                            for h in 0..xs.h {
                                for v in &mut plane[h * xs.w..h * xs.w + len] {
                                    *v += g;
                                }
                            }
                        }
                    }
                }
                Op::Broadcast { x } => {
                    let gys = gy.shape();
                    let gx = grad_buf(&mut grads, *x, self.shape(*x));
                    for b in 0..gys.b {
                        for c in 0..gys.c {
                            let mut acc = T::zero();
                            for v in gy.plane(b, c) {
                                acc += *v;
                            }
                            let i = gx.idx(b, c, 0, 0);
                            gx.data_mut()[i] += acc;
                        }
                    }
                }
                Op::ConcatC { parts } => {
                    let mut base = 0;
                    for &p in parts {
                        let ps = self.shape(p);
                        if self.needs(p) {
                            let gp = grad_buf(&mut grads, p, ps);
                            for b in 0..ps.b {
                                for c in 0..ps.c {
                                    let src = gy.plane(b, base + c);
                                    for (d, s) in gp.plane_mut(b, c).iter_mut().zip(src) {
                                        *d += *s;
                                    }
                                }
                            }
                        }
                        base += ps.c;
                    }
                }
                Op::Sigmoid { x } => {
                    let yv = self.value(NodeId(i));
                    let gx = grad_buf(&mut grads, *x, self.shape(*x));
                    for ((d, &g), &y) in gx.data_mut().iter_mut().zip(gy.data()).zip(yv.data()) {
                        *d += g * y * (T::one() - y);
                    }
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let gx = grad_buf(&mut grads, *x, self.shape(*x));
                    for ((d, &g), &xi) in gx.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        let s = sigmoid_scalar(xi);
                        *d += g * s * (T::one() + xi * (T::one() - s));
                    }
                }
                Op::Add { a, b } => {
                    for n in [*a, *b] {
                        if self.needs(n) {
                            add_into(grad_buf(&mut grads, n, self.shape(n)), &gy);
                        }
                    }
                }
                Op::AddBias { x, v } => {
                    if self.needs(*x) {
                        add_into(grad_buf(&mut grads, *x, self.shape(*x)), &gy);
                    }
                    if self.needs(*v) {
                        let gys = gy.shape();
                        let gv = grad_buf(&mut grads, *v, self.shape(*v));
                        for b in 0..gys.b {
                            for c in 0..gys.c {
                                let mut acc = T::zero();
                                for g in gy.plane(b, c) {
                                    acc += *g;
                                }
                                let i = gv.idx(b, c, 0, 0);
                                gv.data_mut()[i] += acc;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        let ga = grad_buf(&mut grads, *a, self.shape(*a));
                        for ((d, &g), &y) in ga.data_mut().iter_mut().zip(gy.data()).zip(bv.data())
                        {
                            *d += g * y;
                        }
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let gb = grad_buf(&mut grads, *b, self.shape(*b));
                        for ((d, &g), &x) in gb.data_mut().iter_mut().zip(gy.data()).zip(av.data())
                        {
                            *d += g * x;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let gx = grad_buf(&mut grads, *x, self.shape(*x));
                    for (d, &g) in gx.data_mut().iter_mut().zip(gy.data()) {
                        *d += *c * g;
                    }
                }
                Op::Affine { a, b, ca, cb } => {
                    if self.needs(*a) {
                        let ga = grad_buf(&mut grads, *a, self.shape(*a));
                        for (d, &g) in ga.data_mut().iter_mut().zip(gy.data()) {
                            *d += *ca * g;
                        }
                    }
                    if self.needs(*b) {
                        let gb = grad_buf(&mut grads, *b, self.shape(*b));
                        for (d, &g) in gb.data_mut().iter_mut().zip(gy.data()) {
                            *d += *cb * g;
                        }
                    }
                }
                Op::ZeroPad { x, mask } => {
                    let mut gm = gy.clone();
                    mask.zero_padding(&mut gm);
                    add_into(grad_buf(&mut grads, *x, self.shape(*x)), &gm);
                }
                Op::SqSum { a, b, mask } => {
                    let g = gy.data()[0];
                    let two = T::from_f64(2.0);
                    let shape = self.shape(*a);
                    for (n, sign) in [(*a, T::one()), (*b, -T::one())] {
                        if !self.needs(n) {
                            continue;
                        }
                        let av = self.value(*a);
                        let bv = self.value(*b);
                        let gn = grad_buf(&mut grads, n, shape);
                        for bb in 0..shape.b {
                            let len = mask.len_of(bb);
                            for c in 0..shape.c {
                                let pa = av.plane(bb, c);
                                let pb = bv.plane(bb, c);
                                let pg = gn.plane_mut(bb, c);
                                for h in 0..shape.h {
                                    let row = h * shape.w;
                                    for j in 0..len {
                                        let diff = pa[row + j] - pb[row + j];
                                        pg[row + j] += sign * g * two * diff;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { inner: grads })
    }
}

fn grad_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
    shape: Shape,
) -> &'g mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Shared by the tape op and the standalone loss-value path so both produce
/// bit-identical sums.
pub(crate) fn masked_sq_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &FrameMask) -> T {
    let shape = a.shape();
    let mut total = T::zero();
    for bb in 0..shape.b {
        let len = mask.len_of(bb);
        let mut item = T::zero();
        for c in 0..shape.c {
            let pa = a.plane(bb, c);
            let pb = b.plane(bb, c);
            for h in 0..shape.h {
                let row = h * shape.w;
                for j in 0..len {
                    let d = pa[row + j] - pb[row + j];
                    item += d * d;
                }
            }
        }
        total += item;
    }
    total
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = xs.h.div_ceil(stride);
    let wo = xs.w.div_ceil(stride);
    let mut out = Tensor::zeros(Shape::new(xs.b, ws.b, ho, wo));

    for b in 0..xs.b {
        for co in 0..ws.b {
            let bv = bias.at(0, co, 0, 0);
            for v in out.plane_mut(b, co).iter_mut() {
                *v = bv;
            }
            for ci in 0..xs.c {
                let xp = x.plane(b, ci);
                for ki in 0..kh {
                    let dh = ki as isize - ph as isize;
                    for kj in 0..kw {
                        let dw = kj as isize - pw as isize;
                        let wv = w.at(co, ci, ki, kj);
                        let op = out.plane_mut(b, co);
                        for oh in 0..ho {
                            let ih = (oh * stride) as isize + dh;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let xrow = &xp[ih as usize * xs.w..(ih as usize + 1) * xs.w];
                            let orow = &mut op[oh * wo..(oh + 1) * wo];
                            if stride == 1 {
                                let lo = (-dw).max(0) as usize;
                                let hi = (wo as isize).min(xs.w as isize - dw).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let xseg =
                                    &xrow[(lo as isize + dw) as usize..(hi as isize + dw) as usize];
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(xseg) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for (ow, o) in orow.iter_mut().enumerate() {
                                    let iw = (ow * stride) as isize + dw;
                                    if iw >= 0 && iw < xs.w as isize {
                                        *o = *o + wv * xrow[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Scalar>(
    gx: &mut Tensor<T>,
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) {
    let xs = gx.shape();
    let ws = w.shape();
    let gys = gy.shape();
    let (ph, pw) = (ws.h / 2, ws.w / 2);
    for b in 0..xs.b {
        for co in 0..ws.b {
            let gp = gy.plane(b, co);
            for ci in 0..xs.c {
                let xp = gx.plane_mut(b, ci);
                for ki in 0..ws.h {
                    let dh = ki as isize - ph as isize;
                    for kj in 0..ws.w {
                        let dw = kj as isize - pw as isize;
                        let wv = w.at(co, ci, ki, kj);
                        for oh in 0..gys.h {
                            let ih = (oh * stride) as isize + dh;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let grow = &gp[oh * gys.w..(oh + 1) * gys.w];
                            let xrow =
                                &mut xp[ih as usize * xs.w..(ih as usize + 1) * xs.w];
                            if stride == 1 {
                                let lo = (-dw).max(0) as usize;
                                let hi = (gys.w as isize).min(xs.w as isize - dw).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let xseg = &mut xrow
                                    [(lo as isize + dw) as usize..(hi as isize + dw) as usize];
                                for (xv, &g) in xseg.iter_mut().zip(&grow[lo..hi]) {
                                    *xv = *xv + wv * g;
                                }
                            } else {
                                for (ow, &g) in grow.iter().enumerate() {
                                    let iw = (ow * stride) as isize + dw;
                                    if iw >= 0 && iw < xs.w as isize {
                                        xrow[iw as usize] = xrow[iw as usize] + wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<T: Scalar>(
    gw: &mut Tensor<T>,
    gy: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
) {
    let xs = x.shape();
    let ws = gw.shape();
    let gys = gy.shape();
    let (ph, pw) = (ws.h / 2, ws.w / 2);
    for co in 0..ws.b {
        for ci in 0..xs.c {
            for ki in 0..ws.h {
                let dh = ki as isize - ph as isize;
                for kj in 0..ws.w {
                    let dw = kj as isize - pw as isize;
                    let mut acc = T::zero();
                    for b in 0..xs.b {
                        let gp = gy.plane(b, co);
                        let xp = x.plane(b, ci);
                        for oh in 0..gys.h {
                            let ih = (oh * stride) as isize + dh;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let grow = &gp[oh * gys.w..(oh + 1) * gys.w];
                            let xrow = &xp[ih as usize * xs.w..(ih as usize + 1) * xs.w];
                            if stride == 1 {
                                let lo = (-dw).max(0) as usize;
                                let hi = (gys.w as isize).min(xs.w as isize - dw).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let xseg =
                                    &xrow[(lo as isize + dw) as usize..(hi as isize + dw) as usize];
                                for (&g, &xv) in grow[lo..hi].iter().zip(xseg) {
                                    acc += g * xv;
                                }
                            } else {
                                for (ow, &g) in grow.iter().enumerate() {
                                    let iw = (ow * stride) as isize + dw;
                                    if iw >= 0 && iw < xs.w as isize {
                                        acc += g * xrow[iw as usize];
                                    }
                                }
                            }
                        }
                    }
                    let i = gw.idx(co, ci, ki, kj);
                    gw.data_mut()[i] += acc;
                }
            }
        }
    }
}
