//! The differentiable operators every architecture is composed of, with
//! their backward kernels.
//!
//! All functions are pure. Loops run over NHWC memory with the output
//! channel axis innermost so the hot loops are contiguous multiply-adds.

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Padding, Scalar, Tensor4};

/// Output extent and leading pad for one spatial axis.
fn axis_geometry(extent: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if k > extent {
                return Err(Error::shape(format!(
                    "kernel extent {k} exceeds input extent {extent}"
                )));
            }
            Ok(((extent - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = extent.div_ceil(stride);
            if out == 0 {
                return Err(Error::shape("zero-size spatial output"));
            }
            let total = ((out - 1) * stride + k).saturating_sub(extent);
            Ok((out, total / 2))
        }
    }
}

/// Spatial output size of a convolution, `(out_h, out_w)`.
pub fn conv_output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let (oh, _) = axis_geometry(h, kh, stride, padding)?;
    let (ow, _) = axis_geometry(w, kw, stride, padding)?;
    Ok((oh, ow))
}

/// Spatial output size of a valid max pool.
pub fn pool_output_size(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 {
        return Err(Error::shape("pool window must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    conv_output_size(h, w, window, window, stride, Padding::Valid)
}

struct ConvPlan {
    n: usize,
    h: usize,
    w: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl ConvPlan {
    fn new<T: Scalar>(input: &Tensor4<T>, weights: &Tensor4<T>, stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, ic] = input.dims();
        let [kh, kw, wic, oc] = weights.dims();
        if ic != wic {
            return Err(Error::shape(format!(
                "input has {ic} channels but kernel expects {wic}"
            )));
        }
        let (oh, pad_top) = axis_geometry(h, kh, stride, padding)?;
        let (ow, pad_left) = axis_geometry(w, kw, stride, padding)?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("zero-size spatial output"));
        }
        Ok(Self {
            n,
            h,
            w,
            ic,
            kh,
            kw,
            oc,
            oh,
            ow,
            pad_top,
            pad_left,
            stride,
        })
    }

    /// Input row for output row `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], x: T, row: &[T]) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a = *a + x * r;
    }
}

/// Dot product with eight fixed partial sums (vectorizable, deterministic).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            lanes[l] = lanes[l] + a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// 2-D convolution. `weights` is `(kh, kw, in_c, out_c)`.
pub fn conv2d_raw<T: Scalar>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: &[T],
    stride: usize,
    padding: Padding,
) -> Result<Tensor4<T>> {
    let p = ConvPlan::new(input, weights, stride, padding)?;
    if bias.len() != p.oc {
        return Err(Error::shape("bias length does not match output channels"));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); p.n * p.oh * p.ow * p.oc];
    for n in 0..p.n {
        for oy in 0..p.oh {
            for ox in 0..p.ow {
                let o_start = ((n * p.oh + oy) * p.ow + ox) * p.oc;
                let acc = &mut out[o_start..o_start + p.oc];
                acc.copy_from_slice(bias);
                for ky in 0..p.kh {
                    let Some(iy) = p.src(oy, ky, p.pad_top, p.h) else { continue };
                    for kx in 0..p.kw {
                        let Some(ix) = p.src(ox, kx, p.pad_left, p.w) else { continue };
                        let i_start = ((n * p.h + iy) * p.w + ix) * p.ic;
                        let w_start = (ky * p.kw + kx) * p.ic * p.oc;
                        for ci in 0..p.ic {
                            let xv = x[i_start + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let row = &wt[w_start + ci * p.oc..w_start + (ci + 1) * p.oc];
                            axpy(acc, xv, row);
                        }
                    }
                }
            }
        }
    }
    Tensor4::new([p.n, p.oh, p.ow, p.oc], out)
}

pub fn conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>) -> Result<Tensor4<T>> {
    conv2d_raw(input, &kernel.weights, &kernel.bias, kernel.stride, kernel.padding)
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let p = ConvPlan::new(input, weights, stride, padding)?;
    if grad_out.dims() != [p.n, p.oh, p.ow, p.oc] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match conv output {:?}",
            grad_out.dims(),
            [p.n, p.oh, p.ow, p.oc]
        )));
    }
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); p.oc];
    let mut gx = need_input_grad.then(|| vec![T::zero(); x.len()]);
    for n in 0..p.n {
        for oy in 0..p.oh {
            for ox in 0..p.ow {
                let o_start = ((n * p.oh + oy) * p.ow + ox) * p.oc;
                let grow = &g[o_start..o_start + p.oc];
                for (b, &gv) in gb.iter_mut().zip(grow) {
                    *b = *b + gv;
                }
                for ky in 0..p.kh {
                    let Some(iy) = p.src(oy, ky, p.pad_top, p.h) else { continue };
                    for kx in 0..p.kw {
                        let Some(ix) = p.src(ox, kx, p.pad_left, p.w) else { continue };
                        let i_start = ((n * p.h + iy) * p.w + ix) * p.ic;
                        let w_start = (ky * p.kw + kx) * p.ic * p.oc;
                        for ci in 0..p.ic {
                            let range = w_start + ci * p.oc..w_start + (ci + 1) * p.oc;
                            if let Some(gx) = gx.as_mut() {
                                gx[i_start + ci] = gx[i_start + ci] + dot(&wt[range.clone()], grow);
                            }
                            let xv = x[i_start + ci];
                            if xv != T::zero() {
                                axpy(&mut gw[range], xv, grow);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor4::new(input.dims(), d)).transpose()?,
        weights: Tensor4::new(weights.dims(), gw)?,
        bias: gb,
    })
}

/// Valid max pooling; also returns, for each output, the flat input index of
/// the first row-major maximum in its window.
pub fn maxpool2d_with_argmax<T: Scalar>(
    input: &Tensor4<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, h, w, c] = input.dims();
    let (oh, ow) = pool_output_size(h, w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = input.offset(b, oy * stride, ox * stride, ch);
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = input.offset(b, oy * stride + ky, ox * stride + kx, ch);
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor4::new([n, oh, ow, c], out)?, arg))
}

pub fn maxpool2d<T: Scalar>(input: &Tensor4<T>, window: usize, stride: usize) -> Result<Tensor4<T>> {
    maxpool2d_with_argmax(input, window, stride).map(|(out, _)| out)
}

pub fn maxpool2d_backward<T: Scalar>(
    input_dims: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("argmax table does not match output gradient"));
    }
    let mut gx = Tensor4::zeros(input_dims);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(gx)
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.dims() != grad_out.dims() {
        return Err(Error::shape("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::new(input.dims(), data)
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, h, w, c] = input.dims();
    if h == 0 || w == 0 {
        return Err(Error::shape("global average pool over empty spatial extent"));
    }
    let scale = T::of(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for y in 0..h {
            for x in 0..w {
                for (a, &v) in acc.iter_mut().zip(input.pixel(b, y, x)) {
                    *a = *a + v;
                }
            }
        }
        for a in acc.iter_mut() {
            *a = *a * scale;
        }
    }
    Tensor4::new([n, 1, 1, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, h, w, c] = input_dims;
    if grad_out.dims() != [n, 1, 1, c] {
        return Err(Error::shape("global average pool gradient shape mismatch"));
    }
    let scale = T::of(1.0 / (h * w) as f64);
    Ok(Tensor4::from_fn(input_dims, |b, _, _, ch| grad_out.at(b, 0, 0, ch) * scale))
}

/// Concatenates along channels, `a` first.
pub fn channel_concat<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, h, w, ca] = a.dims();
    let [bn, bh, bw, cb] = b.dims();
    if (n, h, w) != (bn, bh, bw) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.data().chunks(ca.max(1)).zip(b.data().chunks(cb.max(1))) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor4::new([n, h, w, ca + cb], out)
}

/// Splits a concatenated gradient back into its two branches.
pub fn channel_split<T: Scalar>(grad: &Tensor4<T>, ca: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, h, w, c] = grad.dims();
    if ca > c {
        return Err(Error::shape("split point beyond channel count"));
    }
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * h * w * ca);
    let mut b = Vec::with_capacity(n * h * w * cb);
    for px in grad.data().chunks(c.max(1)) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    Ok((Tensor4::new([n, h, w, ca], a)?, Tensor4::new([n, h, w, cb], b)?))
}

/// Softmax along the channel axis at every `(n, h, w)` position.
pub fn softmax<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let c = input.channels().max(1);
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor4::new(input.dims(), out).expect("same length")
}
