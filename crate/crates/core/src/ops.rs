//! Differentiable operations on [`Var`].
//!
//! Binary element-wise ops broadcast only over leading axes: the smaller
//! operand's shape must be a suffix of the larger one's.

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs repeats every `n` elements of lhs
    Rhs(usize),
    /// lhs repeats every `n` elements of rhs
    Lhs(usize),
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok((a.to_vec(), Broadcast::Rhs(numel(b))))
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok((b.to_vec(), Broadcast::Lhs(numel(a))))
    } else {
        Err(Error::shape(
            op,
            format!("{a:?} and {b:?} do not broadcast over leading axes"),
        ))
    }
}

/// Sum `g` down to `n` trailing elements (adjoint of leading-axis broadcast).
fn reduce_leading<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    if n == g.numel() {
        return Tensor::from_parts(shape.to_vec(), g.to_vec());
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn binary_forward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: Broadcast,
    out_shape: Vec<usize>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = match mode {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rhs(n) => ad.iter().enumerate().map(|(k, &x)| f(x, bd[k % n])).collect(),
        Broadcast::Lhs(n) => bd.iter().enumerate().map(|(k, &y)| f(ad[k % n], y)).collect(),
    };
    Tensor::from_parts(out_shape, data)
}

/// Per-element adjoints `(da, db)` of a binary op, computed at the broadcast shape.
fn binary_adjoints<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    mode: Broadcast,
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> (Tensor<T>, Tensor<T>) {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let pick = |k: usize| -> (T, T) {
        match mode {
            Broadcast::Same => (ad[k], bd[k]),
            Broadcast::Rhs(n) => (ad[k], bd[k % n]),
            Broadcast::Lhs(n) => (ad[k % n], bd[k]),
        }
    };
    let mut ga = Vec::with_capacity(gd.len());
    let mut gb = Vec::with_capacity(gd.len());
    for (k, &gk) in gd.iter().enumerate() {
        let (x, y) = pick(k);
        ga.push(da(x, y, gk));
        gb.push(db(x, y, gk));
    }
    let full = g.shape().to_vec();
    let ga = reduce_leading(&Tensor::from_parts(full.clone(), ga), a.shape());
    let gb = reduce_leading(&Tensor::from_parts(full, gb), b.shape());
    (ga, gb)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

fn conv_out_side(op: &'static str, side: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::contract(format!("{op}: stride must be >= 1")));
    }
    if k > side + 2 * pad {
        return Err(Error::shape(
            op,
            format!("kernel extent {k} exceeds padded input extent {}", side + 2 * pad),
        ));
    }
    Ok((side + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Lower one image `[C,H,W]` into a `[C*kH*kW, oH*oW]` patch matrix.
    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let ncols = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                let dst = &mut img[(c * self.h + iy as usize) * self.w + ix as usize];
                                *dst = *dst + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        da: fn(T, T, T) -> T,
        db: fn(T, T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (shape, mode) = broadcast_shapes(op, a.shape(), b.shape())?;
        let out = binary_forward(&a, &b, mode, shape, f);
        Ok(self.tape().record1(
            op,
            &[self, other],
            out,
            Box::new(move |g, _| {
                let (ga, gb) = binary_adjoints(&a, &b, &g[0], mode, da, db);
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |_, y, g| g / y,
            |x, y, g| -g * x / (y * y),
        )
    }

    /// Element-wise op whose adjoint depends on input `x` and output `y`.
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        Ok(self.tape().record1(
            op,
            &[self],
            y,
            Box::new(move |g, _| {
                let gx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(y_saved.data())
                    .zip(g[0].data())
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))])
            }),
        ))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", T::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", T::ln, |x, _| x.recip())
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            // `max` would turn NaN into 0 and hide it from the finiteness checks
            |x| if x < T::zero() { T::zero() } else { x },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-1.0)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record1(
            "reshape",
            &[self],
            out,
            Box::new(move |g, _| Ok(vec![Some(g[0].reshape(in_shape.clone())?)])),
        ))
    }

    /// General axis permutation (see [`Tensor::permute`]).
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (k, &a) in axes.iter().enumerate() {
            inverse[a] = k;
        }
        Ok(self.tape().record1(
            "permute",
            &[self],
            out,
            Box::new(move |g, _| Ok(vec![Some(g[0].permute(&inverse)?)])),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::shape("transpose", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Sum over `axis`, removing it.
    pub fn reduce_sum(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis("reduce_sum", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record1(
            "reduce_sum",
            &[self],
            Tensor::from_parts(shape, out),
            Box::new(move |g, _| {
                let gd = g[0].data();
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![Some(Tensor::from_parts(in_shape.clone(), gx))])
            }),
        ))
    }

    pub fn reduce_mean(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        check_axis("reduce_mean", &shape, axis)?;
        let len = shape[axis] as f64;
        self.reduce_sum(axis)?.scale(1.0 / len)
    }

    /// Sum of all elements as a shape-`[]` scalar.
    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record1(
            "sum_all",
            &[self],
            Tensor::scalar(x.sum()),
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(in_shape.clone(), g[0].item()))])),
        ))
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xd[at(l)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xd[at(l)] - m).exp();
                    y[at(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    y[at(l)] = y[at(l)] / z;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let y_saved = y.clone();
        Ok(self.tape().record1(
            "softmax",
            &[self],
            y,
            Box::new(move |g, _| {
                let (yd, gd) = (y_saved.data(), g[0].data());
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot = (0..len).map(|l| yd[at(l)] * gd[at(l)]).sum::<T>();
                        for l in 0..len {
                            gx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(y_saved.shape().to_vec(), gx))])
            }),
        ))
    }

    /// `[..., m, k] @ [..., k, n]`; the rhs may instead be a plain `[k, n]`
    /// matrix shared across the lhs batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}: need >= 2 axes")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if k != k2 || !(shared_rhs || batch_a == batch_b) {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} @ {sb:?}: inner or batch axes disagree"),
            ));
        }
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            // one tall gemm
            T::gemm(batch * m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out);
        } else {
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    c,
                )
            });
        }
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        Ok(self.tape().record1(
            "matmul",
            &[self, other],
            Tensor::from_parts(out_shape, out),
            Box::new(move |g, needs| {
                let gd = g[0].data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    if shared_rhs {
                        // g [B*m, n] @ b^T [n, k]
                        T::gemm(batch * m, n, k, gd, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut ga);
                    } else {
                        ga.par_chunks_mut(m * k).enumerate().for_each(|(bi, c)| {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gd[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &b.data()[bi * k * n..(bi + 1) * k * n],
                                (1, n as isize),
                                T::zero(),
                                c,
                            )
                        });
                    }
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    if shared_rhs {
                        // a^T [k, B*m] @ g [B*m, n]
                        T::gemm(k, batch * m, n, a.data(), (1, k as isize), gd, (n as isize, 1), T::zero(), &mut gb);
                    } else {
                        gb.par_chunks_mut(k * n).enumerate().for_each(|(bi, c)| {
                            T::gemm(
                                k,
                                m,
                                n,
                                &a.data()[bi * m * k..(bi + 1) * m * k],
                                (1, k as isize),
                                &gd[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                T::zero(),
                                c,
                            )
                        });
                    }
                    Tensor::from_parts(b.shape().to_vec(), gb)
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// 2-D cross-correlation of `[N,C,H,W]` with `[O,C,kH,kW]`, no bias.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let (x, kt) = (self.value(), kernel.value());
        let (sx, sk) = (x.shape().to_vec(), kt.shape().to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} and kernel {sk:?} must both be 4-D"),
            ));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("channel axis: input has {}, kernel expects {}", sx[1], sk[1]),
            ));
        }
        let (n, o) = (sx[0], sk[0]);
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
            oh: conv_out_side("conv2d (height)", sx[2], sk[2], stride, padding)?,
            ow: conv_out_side("conv2d (width)", sx[3], sk[3], stride, padding)?,
            stride,
            pad: padding,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let img_len = geom.c * geom.h * geom.w;
        let mut out = vec![T::zero(); n * o * cols];
        out.par_chunks_mut(o * cols).enumerate().for_each(|(ni, dst)| {
            let mut patches = vec![T::zero(); rows * cols];
            geom.im2col(&x.data()[ni * img_len..(ni + 1) * img_len], &mut patches);
            T::gemm(o, rows, cols, kt.data(), (rows as isize, 1), &patches, (cols as isize, 1), T::zero(), dst);
        });
        let out = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
        Ok(self.tape().record1(
            "conv2d",
            &[self, kernel],
            out,
            Box::new(move |g, needs| {
                let gd = g[0].data();
                let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let g_n = &gd[ni * o * cols..(ni + 1) * o * cols];
                        let mut gk = Vec::new();
                        if needs[1] {
                            let mut patches = vec![T::zero(); rows * cols];
                            geom.im2col(&x.data()[ni * img_len..(ni + 1) * img_len], &mut patches);
                            gk = vec![T::zero(); o * rows];
                            // g_n [o, cols] @ patches^T [cols, rows]
                            T::gemm(o, cols, rows, g_n, (cols as isize, 1), &patches, (1, cols as isize), T::zero(), &mut gk);
                        }
                        let mut gx = Vec::new();
                        if needs[0] {
                            let mut gpatch = vec![T::zero(); rows * cols];
                            // kernel^T [rows, o] @ g_n [o, cols]
                            T::gemm(rows, o, cols, kt.data(), (1, rows as isize), g_n, (cols as isize, 1), T::zero(), &mut gpatch);
                            gx = vec![T::zero(); img_len];
                            geom.col2im(&gpatch, &mut gx);
                        }
                        (gk, gx)
                    })
                    .collect();
                let gk = needs[1].then(|| {
                    let mut acc = vec![T::zero(); o * rows];
                    for (p, _) in &per_sample {
                        for (a, &v) in acc.iter_mut().zip(p) {
                            *a = *a + v;
                        }
                    }
                    Tensor::from_parts(kt.shape().to_vec(), acc)
                });
                let gx = needs[0].then(|| {
                    let data = per_sample.iter().flat_map(|(_, gx)| gx.iter().copied()).collect();
                    Tensor::from_parts(x.shape().to_vec(), data)
                });
                Ok(vec![gx, gk])
            }),
        ))
    }

    /// Add a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let sx = x.shape().to_vec();
        if sx.len() < 2 || b.shape() != [sx[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} does not match channel axis of {sx:?}", b.shape()),
            ));
        }
        let (c, inner) = (sx[1], numel(&sx[2..]));
        let bd = b.data();
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + bd[(k / inner) % c])
            .collect();
        Ok(self.tape().record1(
            "add_channel_bias",
            &[self, bias],
            Tensor::from_parts(sx.clone(), out),
            Box::new(move |g, _| {
                let mut gb = vec![T::zero(); c];
                for (k, &v) in g[0].data().iter().enumerate() {
                    gb[(k / inner) % c] = gb[(k / inner) % c] + v;
                }
                Ok(vec![Some(g[0].clone()), Some(Tensor::from_parts(vec![c], gb))])
            }),
        ))
    }

    /// Select rows of `[R, ...]` by index (repeats allowed) into `[len, ...]`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let sx = x.shape().to_vec();
        if sx.is_empty() || indices.is_empty() {
            return Err(Error::shape("gather_rows", "needs a leading axis and >= 1 index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sx[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for leading axis {}", sx[0]),
            ));
        }
        let row = numel(&sx[1..]);
        let xd = x.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let mut shape = sx.clone();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(self.tape().record1(
            "gather_rows",
            &[self],
            Tensor::from_parts(shape, out),
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); numel(&sx)];
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g[0].data()[k * row..(k + 1) * row];
                    for (d, &s) in gx[i * row..(i + 1) * row].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                Ok(vec![Some(Tensor::from_parts(sx.clone(), gx))])
            }),
        ))
    }

    /// Elements `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let sx = x.shape().to_vec();
        let last = *sx.last().ok_or_else(|| Error::shape("slice_last", "scalar input"))?;
        if start >= end || end > last {
            return Err(Error::shape(
                "slice_last",
                format!("range {start}..{end} invalid for last axis {last}"),
            ));
        }
        let width = end - start;
        let out: Vec<T> = x
            .data()
            .chunks(last)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = width;
        Ok(self.tape().record1(
            "slice_last",
            &[self],
            Tensor::from_parts(shape, out),
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); numel(&sx)];
                for (dst, src) in gx.chunks_mut(last).zip(g[0].data().chunks(width)) {
                    dst[start..end].copy_from_slice(src);
                }
                Ok(vec![Some(Tensor::from_parts(sx.clone(), gx))])
            }),
        ))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim().saturating_sub(1)];
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let s = v.shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{s:?} does not share leading axes {lead:?}"),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape().record1(
            "concat_last",
            parts,
            Tensor::from_parts(shape, out),
            Box::new(move |g, _| {
                let gd = g[0].data();
                let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&gd[off..off + w]);
                        off += w;
                    }
                }
                Ok(grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect())
            }),
        ))
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn conv_sum_of_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = x.conv2d(k, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f32>::new();
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
        assert_eq!(x.conv2d(k, 1, 0).unwrap().value(), img);
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 3, 3]));
        let big = tape.constant(Tensor::ones(vec![1, 2, 4, 4]));
        assert!(matches!(x.conv2d(big, 1, 0), Err(Error::Shape { .. })));
        assert!(x.conv2d(big, 1, 1).is_ok());
        let wrong_c = tape.constant(Tensor::ones(vec![1, 3, 1, 1]));
        let err = x.conv2d(wrong_c, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        assert!(matches!(x.conv2d(k1(&tape), 0, 0), Err(Error::Contract(_))));
    }

    fn k1(tape: &Tape<f32>) -> Var<'_, f32> {
        tape.constant(Tensor::ones(vec![1, 2, 1, 1]))
    }

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        let y = x.softmax(0).unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ln_inverts_exp() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-2.0, 0.5, 7.0]).unwrap());
        let y = x.exp().unwrap().ln().unwrap().value();
        assert!(y.max_abs_diff(&x.value()).unwrap() < 1e-12);
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(vec![2, 3]));
        let b = tape.constant(Tensor::ones(vec![3]));
        let c = tape.constant(Tensor::ones(vec![2]));
        assert_eq!(a.add(b).unwrap().shape(), vec![2, 3]);
        assert_eq!(b.add(a).unwrap().shape(), vec![2, 3]);
        assert!(matches!(a.add(c), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_shape_errors() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(vec![2, 3]));
        let b = tape.constant(Tensor::ones(vec![2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![3, 2], |i| (i[0] * 2 + i[1]) as f64));
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.value().data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
