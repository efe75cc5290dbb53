//! Raw forward/backward kernels. Shape validation happens in `autodiff`; these assume
//! consistent inputs.

use crate::tensor::{gemm, MatRef, Scalar};

/// Geometry of a stride-1 zero-padded convolution over a `[C, D, H, W]` sample.
/// 2D convolutions use `d = kd = 1`, `pd = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub pd: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn od(&self) -> usize {
        self.d + 2 * self.pd + 1 - self.kd
    }
    pub fn oh(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }
    pub fn ow(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }
    fn kvol(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }
    fn in_len(&self) -> usize {
        self.cin * self.d * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.od() * self.oh() * self.ow()
    }
    fn out_plane(&self) -> usize {
        self.oh() * self.ow()
    }
}

/// Fill `col[(ci,a,b,c), (oh,ow)]` for output depth slice `od`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], od: usize, col: &mut [T]) {
    let (oh_n, ow_n) = (g.oh(), g.ow());
    let plane = oh_n * ow_n;
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..g.kd {
            let sd = (od + a) as isize - g.pd as isize;
            for b in 0..g.kh {
                for c in 0..g.kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    row += 1;
                    if sd < 0 || sd >= g.d as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let base = (ci * g.d + sd as usize) * g.h * g.w;
                    for oh in 0..oh_n {
                        let out_row = &mut dst[oh * ow_n..(oh + 1) * ow_n];
                        let sh = (oh + b) as isize - g.ph as isize;
                        if sh < 0 || sh >= g.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &x[base + sh as usize * g.w..base + (sh as usize + 1) * g.w];
                        // valid ow: 0 <= ow + c - pw < w
                        let lo = g.pw.saturating_sub(c).min(ow_n);
                        let hi = (g.w + g.pw).saturating_sub(c).min(ow_n).max(lo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + c - g.pw;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate `col` back into `dx` (adjoint of `im2col`).
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], od: usize, dx: &mut [T]) {
    let (oh_n, ow_n) = (g.oh(), g.ow());
    let plane = oh_n * ow_n;
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..g.kd {
            let sd = (od + a) as isize - g.pd as isize;
            for b in 0..g.kh {
                for c in 0..g.kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    row += 1;
                    if sd < 0 || sd >= g.d as isize {
                        continue;
                    }
                    let base = (ci * g.d + sd as usize) * g.h * g.w;
                    for oh in 0..oh_n {
                        let sh = (oh + b) as isize - g.ph as isize;
                        if sh < 0 || sh >= g.h as isize {
                            continue;
                        }
                        let dst = &mut dx[base + sh as usize * g.w..base + (sh as usize + 1) * g.w];
                        let lo = g.pw.saturating_sub(c).min(ow_n);
                        let hi = (g.w + g.pw).saturating_sub(c).min(ow_n).max(lo);
                        let s0 = lo + c;
                        for (k, v) in src[oh * ow_n + lo..oh * ow_n + hi].iter().enumerate() {
                            dst[s0 + k - g.pw] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x` is `n` samples of `[cin,d,h,w]`, `w` is
/// `[cout, cin, kd, kh, kw]`, output `n` samples of `[cout, od, oh, ow]`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    bias: &[T],
) -> Vec<T> {
    let (in_len, out_len, plane, od_n) = (g.in_len(), g.out_len(), g.out_plane(), g.od());
    let kvol = g.kvol();
    let mut out = vec![T::zero(); n * out_len];
    let mut col = vec![T::zero(); kvol * plane];
    let wm = MatRef::new(w, g.cout, kvol);
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * out_len..(s + 1) * out_len];
        for od in 0..od_n {
            im2col(g, xs, od, &mut col);
            let colm = MatRef::new(&col, kvol, plane);
            gemm(wm, colm, &mut ys[od * plane..], od_n * plane, false);
        }
        for (co, &bv) in bias.iter().enumerate() {
            for v in &mut ys[co * od_n * plane..(co + 1) * od_n * plane] {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. Returns `(dx, dw, db)`; `dx` is empty unless requested.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (in_len, out_len, plane, od_n) = (g.in_len(), g.out_len(), g.out_plane(), g.od());
    let kvol = g.kvol();
    let mut dx = if need_dx {
        vec![T::zero(); n * in_len]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); g.cout * kvol];
    let mut db = vec![T::zero(); g.cout];
    let mut col = vec![T::zero(); kvol * plane];
    let mut dcol = vec![T::zero(); kvol * plane];
    let wm = MatRef::new(w, g.cout, kvol);
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dys[co * od_n * plane..(co + 1) * od_n * plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        for od in 0..od_n {
            let dym = MatRef {
                data: &dys[od * plane..],
                rows: g.cout,
                cols: plane,
                rs: od_n * plane,
                cs: 1,
            };
            im2col(g, xs, od, &mut col);
            let colm = MatRef::new(&col, kvol, plane);
            gemm(dym, colm.t(), &mut dw, kvol, true);
            if need_dx {
                gemm(wm.t(), dym, &mut dcol, plane, false);
                col2im(g, &dcol, od, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed 2×2 stride-2 convolution. `x`: `n × [cin,h,w]`; `w`: `[cin, cout, 2, 2]`.
pub(crate) fn deconv_forward<T: Scalar>(
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    x: &[T],
    wt: &[T],
    bias: &[T],
) -> Vec<T> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    let wm = MatRef::new(wt, cin, cout * 4);
    for s in 0..n {
        let xm = MatRef::new(&x[s * cin * hw..(s + 1) * cin * hw], cin, hw);
        gemm(wm.t(), xm, &mut tmp, hw, false);
        let ys = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        for co in 0..cout {
            let bv = bias[co];
            for a in 0..2 {
                for b in 0..2 {
                    let t = &tmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &mut ys[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                        for j in 0..w {
                            row[2 * j + b] = t[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward<T: Scalar>(
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    x: &[T],
    wt: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = if need_dx {
        vec![T::zero(); n * cin * hw]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); cin * cout * 4];
    let mut db = vec![T::zero(); cout];
    let mut dtmp = vec![T::zero(); cout * 4 * hw];
    let wm = MatRef::new(wt, cin, cout * 4);
    for s in 0..n {
        let dys = &dy[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        for co in 0..cout {
            db[co] += dys[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
            for a in 0..2 {
                for b in 0..2 {
                    let t = &mut dtmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &dys[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                        for j in 0..w {
                            t[i * w + j] = row[2 * j + b];
                        }
                    }
                }
            }
        }
        let dtm = MatRef::new(&dtmp, cout * 4, hw);
        let xm = MatRef::new(&x[s * cin * hw..(s + 1) * cin * hw], cin, hw);
        gemm(xm, dtm.t(), &mut dw, cout * 4, true);
        if need_dx {
            gemm(wm, dtm, &mut dx[s * cin * hw..(s + 1) * cin * hw], hw, false);
        }
    }
    (dx, dw, db)
}

/// 2×2 average pooling over the last two axes; `planes` counts the leading entries.
pub(crate) fn avg_pool_forward<T: Scalar>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                yp[i * ow + j] = (xp[r0] + xp[r0 + 1] + xp[r1] + xp[r1 + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(planes: usize, h: usize, w: usize, dy: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dxp[i * w + j] = dyp[(i / 2) * ow + j / 2] * quarter;
            }
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Two-way softmax along an axis of extent 2, laid out as `[outer, 2, inner]`.
pub(crate) fn softmax2_forward<T: Scalar>(outer: usize, inner: usize, x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * 2 * inner;
        for i in 0..inner {
            let (a, b) = (x[base + i], x[base + inner + i]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let s = ea + eb;
            y[base + i] = ea / s;
            y[base + inner + i] = eb / s;
        }
    }
    y
}

pub(crate) fn softmax2_backward<T: Scalar>(outer: usize, inner: usize, y: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * 2 * inner;
        for i in 0..inner {
            let (ia, ib) = (base + i, base + inner + i);
            let dot = dy[ia] * y[ia] + dy[ib] * y[ib];
            dx[ia] = y[ia] * (dy[ia] - dot);
            dx[ib] = y[ib] * (dy[ib] - dot);
        }
    }
    dx
}
