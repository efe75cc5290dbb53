//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every forward op. `backward` walks the tape in reverse and keeps
//! gradients only for leaves (inputs and parameters); intermediate gradients are freed as
//! soon as they have been propagated.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        n: usize,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w_: usize,
    },
    AvgPool {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax2 {
        x: Var,
        outer: usize,
        inner: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Stack {
        a: Var,
        b: Var,
        outer: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Select {
        x: Var,
        outer: usize,
        count: usize,
        inner: usize,
        index: usize,
    },
    Dice {
        p: Var,
        r: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.has_nan() {
        return Err(Error::Numeric(format!("NaN produced by {op}")));
    }
    Ok(())
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is kept after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Parameter leaf without gradient tracking (frozen weights).
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    fn conv_common(
        &mut self,
        (x, w, b): (Var, Var, Var),
        geom: ConvGeom,
        n: usize,
        batched: bool,
        volumetric: bool,
    ) -> Result<Var> {
        let out = kernels::conv_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut shape = Vec::with_capacity(5);
        if batched {
            shape.push(n);
        }
        shape.push(geom.cout);
        if volumetric {
            shape.push(geom.od());
        }
        shape.push(geom.oh());
        shape.push(geom.ow());
        let t = Tensor::new(&shape, out)?;
        check_finite("conv", &t)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv { x, w, b, geom, n }, rg))
    }

    /// 2D convolution, stride 1, "same" zero padding. `x`: `[C,H,W]` or `[N,C,H,W]`;
    /// `w`: `[Cout,Cin,k,k]` with `k` in {1, 3}; `b`: `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let [cout, cin, kh, kw] = ws[..] else {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {ws:?}")));
        };
        if cin != c {
            return Err(Error::dim(format!("conv2d input has {c} channels, kernel expects {cin}")));
        }
        if kh != kw || !(kh == 3 || kh == 1) {
            return Err(Error::dim(format!("conv2d supports 3x3 and 1x1 kernels, got {kh}x{kw}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b))));
        }
        let geom = ConvGeom {
            cin,
            cout,
            d: 1,
            h,
            w: wd,
            kd: 1,
            kh,
            kw,
            pd: 0,
            ph: kh / 2,
            pw: kw / 2,
        };
        self.conv_common((x, w, b), geom, n, xs.len() == 4, false)
    }

    /// 3D convolution, stride 1. `x`: `[C,D,H,W]` or `[N,C,D,H,W]`; `w`: `[Cout,Cin,kd,kh,kw]`.
    /// Supported kernels: 3×3×3 with padding 1, and 2×1×1 with padding 0.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [cout, cin, kd, kh, kw] = ws[..] else {
            return Err(Error::dim(format!("conv3d kernel must be rank 5, got {ws:?}")));
        };
        match (kd, kh, kw, padding) {
            (3, 3, 3, 1) | (2, 1, 1, 0) => {}
            _ => {
                return Err(Error::config(format!(
                    "unsupported conv3d kernel {kd}x{kh}x{kw} with padding {padding}"
                )))
            }
        }
        let (n, c, d, h, wd) = match xs[..] {
            [c, d, h, w] => (1, c, d, h, w),
            [n, c, d, h, w] => (n, c, d, h, w),
            _ => return Err(Error::dim(format!("conv3d input must be rank 4 or 5, got {xs:?}"))),
        };
        if c != cin {
            return Err(Error::dim(format!("conv3d input has {c} channels, kernel expects {cin}")));
        }
        if d + 2 * padding < kd {
            return Err(Error::dim(format!("conv3d depth {d} smaller than kernel {kd}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(format!("conv3d bias must be [{cout}], got {:?}", self.shape(b))));
        }
        let geom = ConvGeom {
            cin,
            cout,
            d,
            h,
            w: wd,
            kd,
            kh,
            kw,
            pd: padding,
            ph: padding,
            pw: padding,
        };
        self.conv_common((x, w, b), geom, n, xs.len() == 5, true)
    }

    /// Transposed 2×2 stride-2 convolution. `x`: `[C,H,W]` or `[N,C,H,W]`;
    /// `w`: `[Cin,Cout,2,2]`.
    pub fn deconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd, batched) = match xs[..] {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::dim(format!("deconv2 input must be rank 3 or 4, got {xs:?}"))),
        };
        let [cin, cout, 2, 2] = ws[..] else {
            return Err(Error::dim(format!("deconv2 kernel must be [Cin,Cout,2,2], got {ws:?}")));
        };
        if cin != c {
            return Err(Error::dim(format!("deconv2 input has {c} channels, kernel expects {cin}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(format!("deconv2 bias must be [{cout}]")));
        }
        let out = kernels::deconv_forward(
            n,
            cin,
            cout,
            h,
            wd,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let shape = if batched {
            vec![n, cout, 2 * h, 2 * wd]
        } else {
            vec![cout, 2 * h, 2 * wd]
        };
        let t = Tensor::new(&shape, out)?;
        check_finite("deconv2", &t)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            t,
            Op::Deconv {
                x,
                w,
                b,
                n,
                cin,
                cout,
                h,
                w_: wd,
            },
            rg,
        ))
    }

    /// 2×2 average pooling, stride 2, over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("avg_pool2 needs at least two axes"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("avg_pool2 needs even spatial dims, got {h}x{w}")));
        }
        let planes = self.value(x).len() / (h * w);
        let out = kernels::avg_pool_forward(planes, h, w, self.value(x).data());
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let t = Tensor::new(&shape, out)?;
        check_finite("avg_pool2", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        check_finite("relu", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Relu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::sigmoid);
        check_finite("sigmoid", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sigmoid { x }, rg))
    }

    /// Softmax across an axis of extent exactly 2.
    pub fn softmax2(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] != 2 {
            return Err(Error::dim(format!(
                "softmax needs exactly 2 channels on axis {axis}, shape {xs:?}"
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let out = kernels::softmax2_forward(outer, inner, self.value(x).data());
        let t = Tensor::new(&xs, out)?;
        check_finite("softmax", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax2 { x, outer, inner }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        check_finite("add", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        check_finite("mul", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let t = self.value(x).map(|v| s * v + c);
        check_finite("affine", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Affine { x, scale }, rg))
    }

    /// Stack two equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack2(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.same_shape(a, b, "stack")?;
        let s = self.shape(a).to_vec();
        if axis > s.len() {
            return Err(Error::dim(format!("stack axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut data = Vec::with_capacity(2 * outer * inner);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for o in 0..outer {
            data.extend_from_slice(&da[o * inner..(o + 1) * inner]);
            data.extend_from_slice(&db[o * inner..(o + 1) * inner]);
        }
        let mut shape = s[..axis].to_vec();
        shape.push(2);
        shape.extend_from_slice(&s[axis..]);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Stack { a, b, outer, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Take entry `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::dim(format!("select {index} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let count = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * count + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Select {
                x,
                outer,
                count,
                inner,
                index,
            },
            rg,
        ))
    }

    /// Soft Dice `2·Σpr / (Σp² + Σr²)` as a one-element tensor; 1 when both sums vanish.
    pub fn dice_soft(&mut self, p: Var, r: Var) -> Result<Var> {
        self.same_shape(p, r, "dice_soft")?;
        let (num, den) = dice_sums(self.value(p).data(), self.value(r).data());
        let d = if den == 0.0 { 1.0 } else { 2.0 * num / den };
        let t = Tensor::scalar(T::from_f64(d));
        check_finite("dice_soft", &t)?;
        let rg = self.rg(p) || self.rg(r);
        Ok(self.push(t, Op::Dice { p, r }, rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let t = Tensor::scalar(T::from_f64(total));
        check_finite("sum", &t)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum { x }, rg))
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a one-element loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], g);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, n } => {
                let (dx, dw, db) = kernels::conv_backward(
                    &geom,
                    n,
                    val(x).data(),
                    val(w).data(),
                    gy.data(),
                    self.rg(x),
                );
                if self.rg(x) {
                    send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
                }
                send(w, Tensor::new(val(w).shape(), dw).unwrap(), grads);
                send(b, Tensor::new(val(b).shape(), db).unwrap(), grads);
            }
            Op::Deconv {
                x,
                w,
                b,
                n,
                cin,
                cout,
                h,
                w_,
            } => {
                let (dx, dw, db) = kernels::deconv_backward(
                    n,
                    cin,
                    cout,
                    h,
                    w_,
                    val(x).data(),
                    val(w).data(),
                    gy.data(),
                    self.rg(x),
                );
                if self.rg(x) {
                    send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
                }
                send(w, Tensor::new(val(w).shape(), dw).unwrap(), grads);
                send(b, Tensor::new(val(b).shape(), db).unwrap(), grads);
            }
            Op::AvgPool { x } => {
                let s = val(x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = val(x).len() / (h * w);
                let dx = kernels::avg_pool_backward(planes, h, w, gy.data());
                send(x, Tensor::new(s, dx).unwrap(), grads);
            }
            Op::Relu { x } => {
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
            }
            Op::Softmax2 { x, outer, inner } => {
                let dx = kernels::softmax2_backward(outer, inner, node.value.data(), gy.data());
                send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
            }
            Op::Add { a, b } => {
                if self.rg(a) && self.rg(b) {
                    send(a, gy.clone(), grads);
                    send(b, gy, grads);
                } else if self.rg(a) {
                    send(a, gy, grads);
                } else {
                    send(b, gy, grads);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let da = gy.data().iter().zip(val(b).data()).map(|(g, y)| *g * *y).collect();
                    send(a, Tensor::new(val(a).shape(), da).unwrap(), grads);
                }
                if self.rg(b) {
                    let db = gy.data().iter().zip(val(a).data()).map(|(g, x)| *g * *x).collect();
                    send(b, Tensor::new(val(b).shape(), db).unwrap(), grads);
                }
            }
            Op::Affine { x, scale } => {
                let s = T::from_f64(scale);
                send(x, gy.map(|g| g * s), grads);
            }
            Op::Stack { a, b, outer, inner } => {
                let mut da = Vec::with_capacity(outer * inner);
                let mut db = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    da.extend_from_slice(&gy.data()[2 * o * inner..(2 * o + 1) * inner]);
                    db.extend_from_slice(&gy.data()[(2 * o + 1) * inner..(2 * o + 2) * inner]);
                }
                send(a, Tensor::new(val(a).shape(), da).unwrap(), grads);
                send(b, Tensor::new(val(b).shape(), db).unwrap(), grads);
            }
            Op::Reshape { x } => {
                send(x, gy.reshape(val(x).shape()).unwrap(), grads);
            }
            Op::Select {
                x,
                outer,
                count,
                inner,
                index,
            } => {
                let mut dx = vec![T::zero(); outer * count * inner];
                for o in 0..outer {
                    let base = (o * count + index) * inner;
                    dx[base..base + inner].copy_from_slice(&gy.data()[o * inner..(o + 1) * inner]);
                }
                send(x, Tensor::new(val(x).shape(), dx).unwrap(), grads);
            }
            Op::Sum { x } => {
                send(x, Tensor::full(val(x).shape(), gy.data()[0]), grads);
            }
            Op::Dice { p, r } => {
                let (pd, rd) = (val(p).data(), val(r).data());
                let (num, den) = dice_sums(pd, rd);
                if den == 0.0 {
                    return;
                }
                let g = gy.data()[0].as_f64();
                // dD/dp_i = 2 r_i / S - 4 (Σpr) p_i / S²
                let grad_wrt = |own: &[T], other: &[T]| -> Vec<T> {
                    own.iter()
                        .zip(other)
                        .map(|(&a, &o)| {
                            let v = 2.0 * o.as_f64() / den - 4.0 * num * a.as_f64() / (den * den);
                            T::from_f64(g * v)
                        })
                        .collect()
                };
                if self.rg(p) {
                    send(p, Tensor::new(val(p).shape(), grad_wrt(pd, rd)).unwrap(), grads);
                }
                if self.rg(r) {
                    send(r, Tensor::new(val(r).shape(), grad_wrt(rd, pd)).unwrap(), grads);
                }
            }
        }
    }

    /// Add the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            for (a, b) in store.get_mut(id).gradient.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

/// `(Σ p·r, Σ p² + Σ r²)` accumulated in double precision.
fn dice_sums<T: Scalar>(p: &[T], r: &[T]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in p.iter().zip(r) {
        let (a, b) = (a.as_f64(), b.as_f64());
        num += a * b;
        den += a * a + b * b;
    }
    (num, den)
}
