//! Differentiable operations on [`Var`]s.
//!
//! Every op computes its forward value eagerly, records itself on the tape
//! and supplies a closure mapping the output gradient to input gradients.

use super::array::{broadcast_offsets, broadcast_shape, Tensor};
use super::tape::{BackwardArgs, Var};
use crate::error::{Error, Result};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_ndim(t: &Tensor, n: usize, op: &str) -> Result<()> {
    if t.ndim() != n {
        return Err(Error::shape(format!("{op} expects {n}-D input, got {:?}", t.shape())));
    }
    Ok(())
}

/// Sums a gradient laid out on `out_shape` back onto a broadcast input.
fn reduce_broadcast(grad: &Tensor, partial: impl Fn(usize) -> f64, offsets: Option<&[usize]>, in_shape: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(in_shape);
    let gd = g.data_mut();
    match offsets {
        None => {
            for (i, (dst, &go)) in gd.iter_mut().zip(grad.data()).enumerate() {
                *dst = go * partial(i);
            }
        }
        Some(offs) => {
            for (i, (&off, &go)) in offs.iter().zip(grad.data()).enumerate() {
                gd[off] += go * partial(i);
            }
        }
    }
    g
}

/// Bilinear taps for resizing `in_len` samples to `out_len` with half-pixel
/// centers: (low index, high index, weight of high).
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Mirror-reflect an index into `0..n` (edge sample not repeated).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j > last {
        j = 2 * last - j;
    }
    j.clamp(0, last) as usize
}

impl<'t> Var<'t> {
    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (value, same) = {
            let a = self.value_ref();
            let b = rhs.value_ref();
            if a.shape() == b.shape() {
                (a.zip_map(&b, f)?, true)
            } else {
                let shape = broadcast_shape(a.shape(), b.shape())?;
                let oa = broadcast_offsets(&shape, a.shape());
                let ob = broadcast_offsets(&shape, b.shape());
                let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
                (Tensor::new(&shape, data)?, false)
            }
        };
        let out_shape = value.shape().to_vec();
        Ok(self.tape().record(
            name,
            value,
            &[self, rhs],
            Box::new(move |args: &BackwardArgs| {
                let (a, b) = (args.inputs[0], args.inputs[1]);
                if same {
                    let (ad, bd) = (a.data(), b.data());
                    let ga = args.needs[0]
                        .then(|| reduce_broadcast(args.grad, |i| da(ad[i], bd[i]), None, a.shape()));
                    let gb = args.needs[1]
                        .then(|| reduce_broadcast(args.grad, |i| db(ad[i], bd[i]), None, b.shape()));
                    return vec![ga, gb];
                }
                let oa = broadcast_offsets(&out_shape, a.shape());
                let ob = broadcast_offsets(&out_shape, b.shape());
                let (ad, bd) = (a.data(), b.data());
                let ga = args.needs[0].then(|| {
                    reduce_broadcast(args.grad, |i| da(ad[oa[i]], bd[ob[i]]), Some(&oa), a.shape())
                });
                let gb = args.needs[1].then(|| {
                    reduce_broadcast(args.grad, |i| db(ad[oa[i]], bd[ob[i]]), Some(&ob), b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            "minimum",
            |a, b| if a <= b { a } else { b },
            |a, b| if a <= b { 1.0 } else { 0.0 },
            |a, b| if a <= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            "maximum",
            |a, b| if a >= b { a } else { b },
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a >= b { 0.0 } else { 1.0 },
        )
    }

    fn unary<F, D>(self, name: &'static str, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value = self.value_ref().map(f);
        self.tape().record(
            name,
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let data = args.grad.data().iter().enumerate().map(|(i, g)| g * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(args.inputs[0].shape(), data).expect("same shape"))]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// `max(x, s)`; the gradient is 1 where `x > s` and 0 where the scalar wins.
    pub fn max_scalar(self, s: f64) -> Var<'t> {
        self.unary("max_scalar", move |x| if x > s { x } else { s }, move |x, _| if x > s { 1.0 } else { 0.0 })
    }

    pub fn min_scalar(self, s: f64) -> Var<'t> {
        self.unary("min_scalar", move |x| if x < s { x } else { s }, move |x, _| if x < s { 1.0 } else { 0.0 })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(
            "abs",
            f64::abs,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Exponential linear unit with unit slope and saturation.
    pub fn elu(self) -> Var<'t> {
        self.unary(
            "elu",
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(
            "softplus",
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value_ref().sum());
        self.tape().record(
            "sum",
            value,
            &[self],
            Box::new(|args: &BackwardArgs| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value_ref().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            if axis >= x.ndim() {
                return Err(Error::shape(format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            let mut out = vec![0.0; outer * inner];
            let xd = x.data();
            for o in 0..outer {
                for k in 0..n {
                    let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.tape().record(
            "sum_axis",
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let shape = args.inputs[0].shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let gd = args.grad.data();
                let mut g = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        g.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape, g).expect("shape"))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.value_ref().shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value_ref().reshape(shape)?;
        Ok(self.tape().record(
            "reshape",
            value,
            &[self],
            Box::new(|args: &BackwardArgs| vec![Some(args.grad.reshape(args.inputs[0].shape()).expect("shape"))]),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        fn tr(t: &Tensor) -> Tensor {
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let d = t.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(&[c, r], out).expect("shape")
        }
        let value = {
            let x = self.value_ref();
            expect_ndim(&x, 2, "transpose")?;
            tr(&x)
        };
        Ok(self.tape().record("transpose", value, &[self], Box::new(|args: &BackwardArgs| vec![Some(tr(args.grad))])))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            if axis >= x.ndim() || start + len > x.shape()[axis] {
                return Err(Error::shape(format!(
                    "narrow({axis}, {start}, {len}) out of range for {:?}",
                    x.shape()
                )));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.tape().record(
            "narrow",
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let shape = args.inputs[0].shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let mut g = Tensor::zeros(shape);
                let gd = g.data_mut();
                let src = args.grad.data();
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gd[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape();
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                    return Err(Error::shape(format!("concat mismatch {base:?} vs {s:?}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut shape = base.clone();
            shape[axis] = total;
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            Tensor::new(&shape, out)?
        };
        Ok(tape.record(
            "concat",
            value,
            parts,
            Box::new(move |args: &BackwardArgs| {
                let out_shape = args.output.shape();
                let (outer, total, inner) = split_axis(out_shape, axis);
                let gd = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(args.inputs.len());
                for (inp, &need) in args.inputs.iter().zip(&args.needs) {
                    let n = inp.shape()[axis];
                    if need {
                        let mut g = Vec::with_capacity(inp.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        grads.push(Some(Tensor::new(inp.shape(), g).expect("shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += n;
                }
                grads
            }),
        ))
    }

    /// Matrix product of 2-D tensors.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
            out
        }
        let value = {
            let a = self.value_ref();
            let b = rhs.value_ref();
            expect_ndim(&a, 2, "matmul")?;
            expect_ndim(&b, 2, "matmul")?;
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            Tensor::new(&[m, n], mm(a.data(), b.data(), m, k, n))?
        };
        Ok(self.tape().record(
            "matmul",
            value,
            &[self, rhs],
            Box::new(|args: &BackwardArgs| {
                let (a, b) = (args.inputs[0], args.inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let g = args.grad.data();
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = args.needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b.data()[p * n + j];
                            }
                            out[i * k + p] = s;
                        }
                    }
                    Tensor::new(&[m, k], out).expect("shape")
                });
                let gb = args.needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            for j in 0..n {
                                out[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    Tensor::new(&[k, n], out).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// 2-D cross-correlation over NCHW input with zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            let w = weight.value_ref();
            expect_ndim(&x, 4, "conv2d")?;
            expect_ndim(&w, 4, "conv2d weight")?;
            let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (k, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if wc != c {
                return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {wc}")));
            }
            if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
                return Err(Error::shape(format!(
                    "conv2d: kernel {kh}x{kw} does not fit padded {h}x{wd} (pad {padding})"
                )));
            }
            let b = match bias {
                Some(b) => {
                    let bv = b.value();
                    if bv.len() != k {
                        return Err(Error::shape(format!("conv2d: bias has {} entries for {k} filters", bv.len())));
                    }
                    Some(bv)
                }
                None => None,
            };
            let geo = ConvGeometry { n, c, h, w: wd, k, kh, kw, stride, padding };
            let mut out = conv_forward(&geo, x.data(), w.data());
            if let Some(b) = b {
                let plane = geo.oh() * geo.ow();
                for (i, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.data()[i % k];
                    for v in chunk {
                        *v += bv;
                    }
                }
            }
            Tensor::new(&[n, k, geo.oh(), geo.ow()], out)?
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(
            "conv2d",
            value,
            &inputs,
            Box::new(move |args: &BackwardArgs| {
                let (x, w) = (args.inputs[0], args.inputs[1]);
                let geo = ConvGeometry {
                    n: x.shape()[0],
                    c: x.shape()[1],
                    h: x.shape()[2],
                    w: x.shape()[3],
                    k: w.shape()[0],
                    kh: w.shape()[2],
                    kw: w.shape()[3],
                    stride,
                    padding,
                };
                let g = args.grad.data();
                let gx = args.needs[0].then(|| Tensor::new(x.shape(), conv_grad_input(&geo, g, w.data())).expect("shape"));
                let gw = args.needs[1].then(|| Tensor::new(w.shape(), conv_grad_weight(&geo, g, x.data())).expect("shape"));
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let plane = geo.oh() * geo.ow();
                        let mut gb = vec![0.0; geo.k];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % geo.k] += chunk.iter().sum::<f64>();
                        }
                        Tensor::new(args.inputs[2].shape(), gb).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }

    /// Bilinear resize of an NCHW tensor to `height`×`width` (half-pixel centers).
    pub fn resize_bilinear(self, height: usize, width: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            expect_ndim(&x, 4, "resize_bilinear")?;
            if height == 0 || width == 0 {
                return Err(Error::shape("resize to empty size"));
            }
            let s = x.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let ty = bilinear_taps(height, h);
            let tx = bilinear_taps(width, w);
            let mut out = Vec::with_capacity(nc * height * width);
            for p in 0..nc {
                let plane = &x.data()[p * h * w..(p + 1) * h * w];
                for &(y0, y1, wy) in &ty {
                    for &(x0, x1, wx) in &tx {
                        let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                        let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                        out.push(top * (1.0 - wy) + bot * wy);
                    }
                }
            }
            Tensor::new(&[s[0], s[1], height, width], out)?
        };
        Ok(self.tape().record(
            "resize_bilinear",
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let s = args.inputs[0].shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let ty = bilinear_taps(height, h);
                let tx = bilinear_taps(width, w);
                let mut g = Tensor::zeros(s);
                let gd = g.data_mut();
                let go = args.grad.data();
                let mut i = 0;
                for p in 0..nc {
                    let plane = &mut gd[p * h * w..(p + 1) * h * w];
                    for &(y0, y1, wy) in &ty {
                        for &(x0, x1, wx) in &tx {
                            let v = go[i];
                            i += 1;
                            plane[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                            plane[y0 * w + x1] += v * (1.0 - wy) * wx;
                            plane[y1 * w + x0] += v * wy * (1.0 - wx);
                            plane[y1 * w + x1] += v * wy * wx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Per-channel mean over a `window`×`window` neighbourhood with
    /// reflection padding; output has the input's shape.
    pub fn box_filter(self, window: usize) -> Result<Var<'t>> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::contract(format!("box filter window must be odd and >= 1, got {window}")));
        }
        let r = (window / 2) as isize;
        let norm = 1.0 / (window * window) as f64;
        let value = {
            let x = self.value_ref();
            expect_ndim(&x, 4, "box_filter")?;
            let s = x.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut out = vec![0.0; x.len()];
            for p in 0..nc {
                let plane = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dy in -r..=r {
                            let yy = reflect(y as isize + dy, h);
                            for dx in -r..=r {
                                acc += plane[yy * w + reflect(xx as isize + dx, w)];
                            }
                        }
                        dst[y * w + xx] = acc * norm;
                    }
                }
            }
            Tensor::new(s, out)?
        };
        Ok(self.tape().record(
            "box_filter",
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let s = args.inputs[0].shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut g = Tensor::zeros(s);
                let gd = g.data_mut();
                let go = args.grad.data();
                for p in 0..nc {
                    let src = &go[p * h * w..(p + 1) * h * w];
                    let dst = &mut gd[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let v = src[y * w + xx] * norm;
                            for dy in -r..=r {
                                let yy = reflect(y as isize + dy, h);
                                for dx in -r..=r {
                                    dst[yy * w + reflect(xx as isize + dx, w)] += v;
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    fn forward_diff(self, horizontal: bool) -> Result<Var<'t>> {
        fn diff(t: &Tensor, horizontal: bool) -> Tensor {
            let s = t.shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut out = vec![0.0; t.len()];
            let d = t.data();
            for p in 0..nc {
                let base = p * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let i = base + y * w + x;
                        out[i] = if horizontal && x + 1 < w {
                            d[i + 1] - d[i]
                        } else if !horizontal && y + 1 < h {
                            d[i + w] - d[i]
                        } else {
                            0.0
                        };
                    }
                }
            }
            Tensor::new(s, out).expect("shape")
        }
        let value = {
            let x = self.value_ref();
            expect_ndim(&x, 4, "spatial difference")?;
            diff(&x, horizontal)
        };
        Ok(self.tape().record(
            if horizontal { "diff_x" } else { "diff_y" },
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let s = args.inputs[0].shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut g = Tensor::zeros(s);
                let gd = g.data_mut();
                let go = args.grad.data();
                for p in 0..nc {
                    let base = p * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let i = base + y * w + x;
                            if horizontal && x + 1 < w {
                                gd[i + 1] += go[i];
                                gd[i] -= go[i];
                            } else if !horizontal && y + 1 < h {
                                gd[i + w] += go[i];
                                gd[i] -= go[i];
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Signed forward difference along width, zero in the trailing column.
    pub fn diff_x(self) -> Result<Var<'t>> {
        self.forward_diff(true)
    }

    /// Signed forward difference along height, zero in the trailing row.
    pub fn diff_y(self) -> Result<Var<'t>> {
        self.forward_diff(false)
    }

    /// Bilinear sampling of `self` (N,C,H,W) at pixel coordinates
    /// (N,2,Ho,Wo) holding (x, y). Where `mask` (N,1,Ho,Wo) is zero the
    /// output is zero and no gradient flows.
    pub fn grid_sample(self, coords: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
        let mask = mask.clone();
        let value = {
            let src = self.value_ref();
            let co = coords.value_ref();
            expect_ndim(&src, 4, "grid_sample")?;
            expect_ndim(&co, 4, "grid_sample coords")?;
            let (n, c) = (src.shape()[0], src.shape()[1]);
            let (ho, wo) = (co.shape()[2], co.shape()[3]);
            if co.shape()[0] != n || co.shape()[1] != 2 {
                return Err(Error::shape(format!("coords {:?} for source {:?}", co.shape(), src.shape())));
            }
            if mask.shape() != [n, 1, ho, wo] {
                return Err(Error::shape(format!("mask {:?} for coords {:?}", mask.shape(), co.shape())));
            }
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            for b in 0..n {
                for y in 0..ho {
                    for x in 0..wo {
                        if mask.at4(b, 0, y, x) == 0.0 {
                            continue;
                        }
                        let t = SampleTap::new(co.at4(b, 0, y, x), co.at4(b, 1, y, x), src.shape()[2], src.shape()[3]);
                        for ch in 0..c {
                            out.set4(b, ch, y, x, t.sample(&src, b, ch));
                        }
                    }
                }
            }
            out
        };
        Ok(self.tape().record(
            "grid_sample",
            value,
            &[self, coords],
            Box::new(move |args: &BackwardArgs| {
                let (src, co) = (args.inputs[0], args.inputs[1]);
                let (n, c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
                let (ho, wo) = (co.shape()[2], co.shape()[3]);
                let mut gs = args.needs[0].then(|| Tensor::zeros(src.shape()));
                let mut gc = args.needs[1].then(|| Tensor::zeros(co.shape()));
                for b in 0..n {
                    for y in 0..ho {
                        for x in 0..wo {
                            if mask.at4(b, 0, y, x) == 0.0 {
                                continue;
                            }
                            let t = SampleTap::new(co.at4(b, 0, y, x), co.at4(b, 1, y, x), h, w);
                            let (mut dx, mut dy) = (0.0, 0.0);
                            for ch in 0..c {
                                let g = args.grad.at4(b, ch, y, x);
                                if let Some(gs) = gs.as_mut() {
                                    t.scatter(gs, b, ch, g);
                                }
                                let (sx, sy) = t.coord_grad(src, b, ch);
                                dx += g * sx;
                                dy += g * sy;
                            }
                            if let Some(gc) = gc.as_mut() {
                                gc.set4(b, 0, y, x, dx);
                                gc.set4(b, 1, y, x, dy);
                            }
                        }
                    }
                }
                vec![gs, gc]
            }),
        ))
    }

    /// Rotation matrix (3×3) from an axis-angle 3-vector (Rodrigues).
    pub fn axis_angle_to_rotation(self) -> Result<Var<'t>> {
        let value = {
            let w = self.value_ref();
            if w.len() != 3 {
                return Err(Error::shape(format!("axis-angle needs 3 entries, got {:?}", w.shape())));
            }
            let r = rodrigues(&[w.data()[0], w.data()[1], w.data()[2]]);
            Tensor::new(&[3, 3], r.iter().flatten().copied().collect())?
        };
        Ok(self.tape().record(
            "axis_angle_to_rotation",
            value,
            &[self],
            Box::new(|args: &BackwardArgs| {
                let w = args.inputs[0].data();
                let jac = rodrigues_jacobian(&[w[0], w[1], w[2]]);
                let g = args.grad.data();
                let mut out = vec![0.0; 3];
                for (i, dri) in jac.iter().enumerate() {
                    out[i] = dri.iter().flatten().zip(g).map(|(a, b)| a * b).sum();
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), out).expect("shape"))]
            }),
        ))
    }

    /// Divides each row of a 2-D tensor by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            expect_ndim(&x, 2, "l2_normalize_rows")?;
            let m = x.shape()[1];
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(m.max(1)) {
                let d = row_norm(row).max(eps);
                for v in row {
                    *v /= d;
                }
            }
            Tensor::new(x.shape(), out)?
        };
        Ok(self.tape().record(
            "l2_normalize_rows",
            value,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0];
                let m = x.shape()[1].max(1);
                let mut g = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(m).zip(args.output.data().chunks(m)).zip(args.grad.data().chunks(m)) {
                    let n = row_norm(xr);
                    if n > eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        g.extend(yr.iter().zip(gr).map(|(y, gv)| (gv - y * dot) / n));
                    } else {
                        g.extend(gr.iter().map(|gv| gv / eps));
                    }
                }
                vec![Some(Tensor::new(x.shape(), g).expect("shape"))]
            }),
        ))
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn oh(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    fn ow(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Output index range along one axis whose input tap `o*stride + k - pad`
    /// falls inside `0..len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        let last = len as isize - 1 + p - k;
        if last < 0 {
            return (0, 0);
        }
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = (last / s + 1).min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Unfolds one image into columns `[C·KH·KW, OH·OW]`, zero where the
/// kernel overhangs the padded border.
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.oh(), g.ow());
    let p = oh * ow;
    let mut col = vec![0.0; g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.valid_range(ky, g.h, oh);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid_range(kx, g.w, ow);
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = kx as isize - g.padding as isize;
                        dst[x0..x1].copy_from_slice(&src[(x0 as isize + off) as usize..(x1 as isize + off) as usize]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back onto one image.
fn col2im(g: &ConvGeometry, col: &[f64], x: &mut [f64]) {
    let (oh, ow) = (g.oh(), g.ow());
    let p = oh * ow;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = g.valid_range(ky, g.h, oh);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid_range(kx, g.w, ow);
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// `out += a · x`.
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight interleaved partial sums, so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Columns processed together, sized to keep a block of `col` in cache.
const CONV_BLOCK: usize = 512;

fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.oh() * g.ow();
    let q = g.c * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.k * p];
    for b in 0..g.n {
        let col = im2col(g, &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w]);
        let dst = &mut out[b * g.k * p..(b + 1) * g.k * p];
        for start in (0..p).step_by(CONV_BLOCK) {
            let len = CONV_BLOCK.min(p - start);
            for k in 0..g.k {
                let o = &mut dst[k * p + start..k * p + start + len];
                for (j, &wv) in w[k * q..(k + 1) * q].iter().enumerate() {
                    if wv != 0.0 {
                        axpy(o, wv, &col[j * p + start..j * p + start + len]);
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input(g: &ConvGeometry, go: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.oh() * g.ow();
    let q = g.c * g.kh * g.kw;
    let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
    for b in 0..g.n {
        let src = &go[b * g.k * p..(b + 1) * g.k * p];
        let mut gcol = vec![0.0; q * p];
        for start in (0..p).step_by(CONV_BLOCK) {
            let len = CONV_BLOCK.min(p - start);
            for j in 0..q {
                let o = &mut gcol[j * p + start..j * p + start + len];
                for k in 0..g.k {
                    let wv = w[k * q + j];
                    if wv != 0.0 {
                        axpy(o, wv, &src[k * p + start..k * p + start + len]);
                    }
                }
            }
        }
        col2im(g, &gcol, &mut gx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w]);
    }
    gx
}

fn conv_grad_weight(g: &ConvGeometry, go: &[f64], x: &[f64]) -> Vec<f64> {
    let p = g.oh() * g.ow();
    let q = g.c * g.kh * g.kw;
    let mut gw = vec![0.0; g.k * q];
    for b in 0..g.n {
        let col = im2col(g, &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w]);
        let src = &go[b * g.k * p..(b + 1) * g.k * p];
        for k in 0..g.k {
            let gk = &src[k * p..(k + 1) * p];
            for j in 0..q {
                gw[k * q + j] += dot(gk, &col[j * p..(j + 1) * p]);
            }
        }
    }
    gw
}

/// Four-neighbour bilinear tap at a continuous pixel position.
struct SampleTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

impl SampleTap {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let axis = |v: f64, len: usize| -> (usize, usize, f64) {
            if len == 1 {
                return (0, 0, 0.0);
            }
            let v = v.clamp(0.0, (len - 1) as f64);
            let i0 = (v.floor() as usize).min(len - 2);
            (i0, i0 + 1, v - i0 as f64)
        };
        let (x0, x1, fx) = axis(x, w);
        let (y0, y1, fy) = axis(y, h);
        SampleTap { x0, x1, y0, y1, fx, fy }
    }

    fn corners(&self, src: &Tensor, b: usize, c: usize) -> [f64; 4] {
        [
            src.at4(b, c, self.y0, self.x0),
            src.at4(b, c, self.y0, self.x1),
            src.at4(b, c, self.y1, self.x0),
            src.at4(b, c, self.y1, self.x1),
        ]
    }

    fn sample(&self, src: &Tensor, b: usize, c: usize) -> f64 {
        let [s00, s01, s10, s11] = self.corners(src, b, c);
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fy) * ((1.0 - fx) * s00 + fx * s01) + fy * ((1.0 - fx) * s10 + fx * s11)
    }

    fn scatter(&self, g: &mut Tensor, b: usize, c: usize, v: f64) {
        let (fx, fy) = (self.fx, self.fy);
        let add = |g: &mut Tensor, y, x, w: f64| {
            let cur = g.at4(b, c, y, x);
            g.set4(b, c, y, x, cur + v * w);
        };
        add(g, self.y0, self.x0, (1.0 - fy) * (1.0 - fx));
        add(g, self.y0, self.x1, (1.0 - fy) * fx);
        add(g, self.y1, self.x0, fy * (1.0 - fx));
        add(g, self.y1, self.x1, fy * fx);
    }

    fn coord_grad(&self, src: &Tensor, b: usize, c: usize) -> (f64, f64) {
        let [s00, s01, s10, s11] = self.corners(src, b, c);
        let (fx, fy) = (self.fx, self.fy);
        let dx = if self.x1 == self.x0 { 0.0 } else { (1.0 - fy) * (s01 - s00) + fy * (s11 - s10) };
        let dy = if self.y1 == self.y0 { 0.0 } else { (1.0 - fx) * (s10 - s00) + fx * (s11 - s01) };
        (dx, dy)
    }
}

type Mat3 = [[f64; 3]; 3];

fn skew(w: &[f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat_mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Coefficients A(θ)=sinθ/θ, B(θ)=(1−cosθ)/θ² and their derivatives divided
/// by θ, with series expansions near zero.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-3 {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

pub(crate) fn rodrigues(w: &[f64; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = rodrigues_coefficients(theta);
    let k = skew(w);
    let k2 = mat_mul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// ∂R/∂w_i for i = 0..3, differentiating R = I + A K + B K².
fn rodrigues_jacobian(w: &[f64; 3]) -> [Mat3; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, da, db) = rodrigues_coefficients(theta);
    let k = skew(w);
    let k2 = mat_mul3(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, d) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(&e);
        let ek = mat_mul3(&ei, &k);
        let ke = mat_mul3(&k, &ei);
        for r in 0..3 {
            for c in 0..3 {
                d[r][c] = da * w[i] * k[r][c] + a * ei[r][c] + db * w[i] * k2[r][c] + b * (ek[r][c] + ke[r][c]);
            }
        }
    }
    out
}
