//! Raw numeric kernels shared by the tape and by code that works on plain
//! tensors (e.g. smoothing an already-computed gradient).

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let (c, h, w) = input.chw("conv2d")?;
        let [o, cg, kh, kw] = weight.shape()[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be (O, C/groups, kH, kW), got {:?}", weight.shape()),
            ));
        };
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c}, weight {:?}, groups {groups}", weight.shape()),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            groups,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn per_group(&self) -> (usize, usize) {
        (self.in_channels / self.groups, self.out_channels / self.groups)
    }

    /// Range of output columns whose input column `ow*stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.out_w, self.width, self.stride, kj, self.pad)
    }

    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        valid_range(self.out_h, self.height, self.stride, ki, self.pad)
    }
}

fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= in_len - 1
    let hi = if in_len + pad <= k { 0 } else { ((in_len + pad - 1 - k) / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, g: &ConvGeometry) -> Tensor {
    let (cpg, opg) = g.per_group();
    let x = input.data();
    let wt = weight.data();
    let (hw_in, hw_out) = (g.height * g.width, g.out_h * g.out_w);
    let mut out = vec![0.0; g.out_channels * hw_out];
    for o in 0..g.out_channels {
        let group = o / opg;
        let out_plane = &mut out[o * hw_out..(o + 1) * hw_out];
        for cl in 0..cpg {
            let c = group * cpg + cl;
            let in_plane = &x[c * hw_in..(c + 1) * hw_in];
            for ki in 0..g.kernel_h {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kernel_w {
                    let wv = wt[((o * cpg + cl) * g.kernel_h + ki) * g.kernel_w + kj];
                    let (c0, c1) = g.valid_cols(kj);
                    for oh in r0..r1 {
                        let ih = oh * g.stride + ki - g.pad;
                        let row_in = &in_plane[ih * g.width..(ih + 1) * g.width];
                        let row_out = &mut out_plane[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let off = kj as isize - g.pad as isize;
                            let src = &row_in[(c0 as isize + off) as usize..(c1 as isize + off) as usize];
                            for (d, s) in row_out[c0..c1].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ow in c0..c1 {
                                row_out[ow] += wv * row_in[ow * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of `conv2d` w.r.t. its input and weight, given the output adjoint.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (cpg, opg) = g.per_group();
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let (hw_in, hw_out) = (g.height * g.width, g.out_h * g.out_w);
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; wt.len()]);
    for o in 0..g.out_channels {
        let group = o / opg;
        let go_plane = &go[o * hw_out..(o + 1) * hw_out];
        for cl in 0..cpg {
            let c = group * cpg + cl;
            let in_plane = &x[c * hw_in..(c + 1) * hw_in];
            for ki in 0..g.kernel_h {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kernel_w {
                    let widx = ((o * cpg + cl) * g.kernel_h + ki) * g.kernel_w + kj;
                    let wv = wt[widx];
                    let (c0, c1) = g.valid_cols(kj);
                    let mut acc = 0.0;
                    for oh in r0..r1 {
                        let ih = oh * g.stride + ki - g.pad;
                        let go_row = &go_plane[oh * g.out_w..(oh + 1) * g.out_w];
                        for ow in c0..c1 {
                            let iw = ow * g.stride + kj - g.pad;
                            let idx = ih * g.width + iw;
                            if let Some(gx) = gx.as_mut() {
                                gx[c * hw_in + idx] += wv * go_row[ow];
                            }
                            acc += in_plane[idx] * go_row[ow];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
    )
}

/// Apply the same 2-D kernel to every channel with "same" zero padding.
pub fn depthwise_same(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, _, _) = input.chw("depthwise_same")?;
    let [kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape("depthwise_same", format!("kernel must be 2-D, got {:?}", kernel.shape())));
    };
    if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
        return Err(Error::shape("depthwise_same", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    let mut weight = Vec::with_capacity(c * kh * kw);
    for _ in 0..c {
        weight.extend_from_slice(kernel.data());
    }
    let weight = Tensor::from_parts(vec![c, 1, kh, kw], weight);
    let geom = ConvGeometry::new(input, &weight, 1, kh / 2, c)?;
    Ok(conv2d(input, &weight, &geom))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let [m, n] = a.shape()[..] else { panic!("transpose expects a matrix") };
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub fn avg_pool(input: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw("avg_pool")?;
    if size == 0 || size > h || size > w {
        return Err(Error::shape("avg_pool", format!("window {size} on {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for di in 0..size {
                    let base = ch * h * w + (i * size + di) * w + j * size;
                    s += x[base..base + size].iter().sum::<f64>();
                }
                out[(ch * oh + i) * ow + j] = s * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn avg_pool_backward(input_shape: &[usize], grad_out: &Tensor, size: usize) -> Tensor {
    let [c, h, w] = input_shape[..] else { unreachable!() };
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    let go = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = go[(ch * oh + i) * ow + j] * inv;
                for di in 0..size {
                    let base = ch * h * w + (i * size + di) * w + j * size;
                    for v in &mut gx[base..base + size] {
                        *v += g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Source coordinate and interpolation weight for each output position
/// (align-corners mapping, so equal sizes map exactly onto the identity).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = if out_len > 1 { (in_len - 1) as f64 / (out_len - 1) as f64 } else { 0.0 };
    (0..out_len)
        .map(|o| {
            let src = o as f64 * scale;
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "target size must be positive"));
    }
    let (ty, tx) = (bilinear_taps(out_h, h), bilinear_taps(out_w, w));
    let x = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let [c, h, w] = input_shape[..] else { unreachable!() };
    let [_, out_h, out_w] = grad_out.shape()[..] else { unreachable!() };
    let (ty, tx) = (bilinear_taps(out_h, h), bilinear_taps(out_w, w));
    let go = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = go[(ch * out_h + oy) * out_w + ox];
                plane[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += g * (1.0 - wy) * wx;
                plane[y1 * w + x0] += g * wy * (1.0 - wx);
                plane[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Place `input` into a zero canvas of `(C, out_h, out_w)` at `(top, left)`.
pub fn zero_pad(input: &Tensor, out_h: usize, out_w: usize, top: usize, left: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw("zero_pad")?;
    if top + h > out_h || left + w > out_w {
        return Err(Error::shape("zero_pad", format!("{h}x{w} at ({top}, {left}) does not fit in {out_h}x{out_w}")));
    }
    let x = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for i in 0..h {
            let dst = (ch * out_h + top + i) * out_w + left;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + i) * w..(ch * h + i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub fn crop(input: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let [c, ih, iw] = input.shape()[..] else { unreachable!() };
    debug_assert!(top + h <= ih && left + w <= iw);
    let x = input.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let src = (ch * ih + top + i) * iw + left;
            out.extend_from_slice(&x[src..src + w]);
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}
