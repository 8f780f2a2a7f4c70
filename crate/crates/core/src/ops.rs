//! Differentiable operators used by the segmentation network.
//!
//! Every kernel parallelises over disjoint output planes; within a plane the
//! accumulation order is fixed, so results do not depend on the worker count.

use rayon::prelude::*;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of a dense 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvSpec {
    /// Stride-1 convolution with `k x k` kernel and padding `pad`.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            pad: (pad, pad),
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_channels,
            h: self.kernel.0,
            w: self.kernel.1,
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: 1,
            h: 1,
            w: 1,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |size: usize, k: usize, s: usize, p: usize, which: &str| -> Result<usize> {
            let padded = size + 2 * p;
            if s == 0 || k == 0 || padded < k || (padded - k) % s != 0 {
                return Err(Error::shape(format!(
                    "conv {which}: size {size} with kernel {k}, stride {s}, pad {p} does not tile exactly"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.pad.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.pad.1, "width")?,
        ))
    }
}

/// Per-channel learnable upsampling by an even factor `f`
/// (kernel `2f`, stride `f`, crop `f/2` per side).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvSpec {
    pub channels: usize,
    pub factor: usize,
}

impl DeconvSpec {
    pub fn new(channels: usize, factor: usize) -> Result<Self> {
        if factor < 2 || factor % 2 != 0 {
            return Err(Error::Parameter(format!("upsampling factor must be even and >= 2, got {factor}")));
        }
        if channels == 0 {
            return Err(Error::Parameter("deconvolution needs at least one channel".into()));
        }
        Ok(DeconvSpec { channels, factor })
    }

    pub fn kernel(&self) -> usize {
        2 * self.factor
    }

    pub fn pad(&self) -> usize {
        self.factor / 2
    }

    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.channels,
            c: 1,
            h: self.kernel(),
            w: self.kernel(),
        }
    }
}

/// Range of output indices `o` with `0 <= o*stride + offset < limit`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let last = limit as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn new(x: Shape, spec: &ConvSpec) -> Result<Self> {
        let (oh, ow) = spec.output_size(x.h, x.w)?;
        Ok(ConvGeom {
            n: x.n,
            ic: spec.in_channels,
            oc: spec.out_channels,
            h: x.h,
            w: x.w,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.pad.0,
            pw: spec.pad.1,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape {
            n: self.n,
            c: self.oc,
            h: self.oh,
            w: self.ow,
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.ic + i) * self.kh + ky) * self.kw + kx
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![T::zero(); g.n * g.oc * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(pi, dst)| {
        let (n, o) = (pi / g.oc, pi % g.oc);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..g.ic {
            let src = &x[(n * g.ic + i) * in_plane..][..in_plane];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.oh, g.sh, ky as isize - g.ph as isize, g.h);
                for kx in 0..g.kw {
                    let wv = wt[g.widx(o, i, ky, kx)];
                    let xoff = kx as isize - g.pw as isize;
                    let (ox0, ox1) = valid_range(g.ow, g.sw, xoff, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ky - g.ph;
                        let srow = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.ow..][..g.ow];
                        if g.sw == 1 {
                            let start = (ox0 as isize + xoff) as usize;
                            for (d, &s) in drow[ox0..ox1].iter_mut().zip(&srow[start..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox as isize * g.sw as isize + xoff) as usize;
                                drow[ox] += wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(dy: &[T], wt: &[T], g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut dx = vec![T::zero(); g.n * g.ic * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, dst)| {
        let (n, i) = (pi / g.ic, pi % g.ic);
        for o in 0..g.oc {
            let src = &dy[(n * g.oc + o) * out_plane..][..out_plane];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.oh, g.sh, ky as isize - g.ph as isize, g.h);
                for kx in 0..g.kw {
                    let wv = wt[g.widx(o, i, ky, kx)];
                    let xoff = kx as isize - g.pw as isize;
                    let (ox0, ox1) = valid_range(g.ow, g.sw, xoff, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ky - g.ph;
                        let drow = &mut dst[iy * g.w..][..g.w];
                        let srow = &src[oy * g.ow..][..g.ow];
                        if g.sw == 1 {
                            let start = (ox0 as isize + xoff) as usize;
                            for (d, &s) in drow[start..].iter_mut().zip(&srow[ox0..ox1]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox as isize * g.sw as isize + xoff) as usize;
                                drow[ix] += wv * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv_backward_weight<T: Scalar>(dy: &[T], x: &[T], g: ConvGeom) -> Vec<T> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let per_out = g.ic * g.kh * g.kw;
    let mut dw = vec![T::zero(); g.oc * per_out];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(o, dst)| {
        for i in 0..g.ic {
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.oh, g.sh, ky as isize - g.ph as isize, g.h);
                for kx in 0..g.kw {
                    let xoff = kx as isize - g.pw as isize;
                    let (ox0, ox1) = valid_range(g.ow, g.sw, xoff, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let gp = &dy[(n * g.oc + o) * out_plane..][..out_plane];
                        let xp = &x[(n * g.ic + i) * in_plane..][..in_plane];
                        for oy in oy0..oy1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let grow = &gp[oy * g.ow..][..g.ow];
                            let xrow = &xp[iy * g.w..][..g.w];
                            if g.sw == 1 {
                                let start = (ox0 as isize + xoff) as usize;
                                for (&a, &b) in grow[ox0..ox1].iter().zip(&xrow[start..]) {
                                    acc += a * b;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = (ox as isize * g.sw as isize + xoff) as usize;
                                    acc += grow[ox] * xrow[ix];
                                }
                            }
                        }
                    }
                    dst[(i * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    dw
}

fn plane_sums<T: Scalar>(dy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .into_par_iter()
        .map(|o| {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &dy[(b * c + o) * plane..][..plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

struct ConvRule {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let dx = needs[0]
            .then(|| Tensor::from_vec(x.shape(), conv_backward_input(dy.data(), w.data(), g)))
            .transpose()?;
        let dw = needs[1]
            .then(|| Tensor::from_vec(w.shape(), conv_backward_weight(dy.data(), x.data(), g)))
            .transpose()?;
        let mut grads = vec![dx, dw];
        if self.has_bias {
            let db = needs[2]
                .then(|| Tensor::from_vec(inputs[2].shape(), plane_sums(dy.data(), g.n, g.oc, g.oh * g.ow)))
                .transpose()?;
            grads.push(db);
        }
        Ok(grads)
    }
}

/// Cross-correlation of `x` with `weight` (out, in, kh, kw) plus optional bias (out, 1, 1, 1).
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    let xs = tape.get(x)?.shape();
    if xs.c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {}",
            spec.in_channels, xs.c
        )));
    }
    let ws = tape.get(weight)?.shape();
    if ws != spec.weight_shape() {
        return Err(Error::shape(format!("conv2d weight {ws}, expected {}", spec.weight_shape())));
    }
    if let Some(b) = bias {
        let bs = tape.get(b)?.shape();
        if bs != spec.bias_shape() {
            return Err(Error::shape(format!("conv2d bias {bs}, expected {}", spec.bias_shape())));
        }
    }
    let geom = ConvGeom::new(xs, spec)?;
    let out = conv_forward(
        tape.value(x).data(),
        tape.value(weight).data(),
        bias.map(|b| tape.value(b).data()),
        geom,
    );
    let out = Tensor::from_vec(geom.out_shape(), out)?;
    let rule = Box::new(ConvRule {
        geom,
        has_bias: bias.is_some(),
    });
    match bias {
        Some(b) => tape.push(&[x, weight, b], out, rule),
        None => tape.push(&[x, weight], out, rule),
    }
}

struct MaxPoolRule {
    argmax: Vec<u32>,
}

impl<T: Scalar> Backward<T> for MaxPoolRule {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let xs = inputs[0].shape();
        let (in_plane, out_plane) = (xs.plane(), dy.shape().plane());
        let mut dx = vec![T::zero(); xs.numel()];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, dst)| {
            let grads = &dy.data()[pi * out_plane..][..out_plane];
            let arg = &self.argmax[pi * out_plane..][..out_plane];
            for (&a, &g) in arg.iter().zip(grads) {
                dst[a as usize] += g;
            }
        });
        Ok(vec![Some(Tensor::from_vec(xs, dx)?)])
    }
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// element of the window in row-major order.
pub fn maxpool2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xt = tape.get(x)?;
    let s = xt.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2 needs even spatial size, got {}x{}", s.h, s.w)));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape { h: oh, w: ow, ..s };
    let out_plane = oh * ow;
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut argmax = vec![0u32; out_shape.numel()];
    out.par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(pi, (dst, arg))| {
            let src = &xt.data()[pi * s.plane()..][..s.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * s.w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    arg[oy * ow + ox] = best as u32;
                }
            }
        });
    let out = Tensor::from_vec(out_shape, out)?;
    tape.push(&[x], out, Box::new(MaxPoolRule { argmax }))
}

struct ReluRule;

impl<T: Scalar> Backward<T> for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::from_vec(dy.shape(), data)?)])
    }
}

/// Element-wise `max(0, x)`; the subgradient at exactly 0 is 0.
pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.get(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
    tape.push(&[x], out, Box::new(ReluRule))
}

struct DeconvRule {
    spec: DeconvSpec,
}

impl<T: Scalar> Backward<T> for DeconvRule {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let xs = x.shape();
        let f = self.spec.factor;
        let (kk, p) = (self.spec.kernel(), self.spec.pad());
        let (oh, ow) = (xs.h * f, xs.w * f);
        let (in_plane, out_plane) = (xs.plane(), oh * ow);

        let dx = if needs[0] {
            let mut dx = vec![T::zero(); xs.numel()];
            dx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, dst)| {
                let c = pi % xs.c;
                let kern = &k.data()[c * kk * kk..][..kk * kk];
                let g = &dy.data()[pi * out_plane..][..out_plane];
                for iy in 0..xs.h {
                    for ix in 0..xs.w {
                        let mut acc = T::zero();
                        for ky in 0..kk {
                            let oy = (iy * f + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let grow = &g[oy as usize * ow..][..ow];
                            for kx in 0..kk {
                                let ox = (ix * f + kx) as isize - p as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                acc += grow[ox as usize] * kern[ky * kk + kx];
                            }
                        }
                        dst[iy * xs.w + ix] = acc;
                    }
                }
            });
            Some(Tensor::from_vec(xs, dx)?)
        } else {
            None
        };

        let dk = if needs[1] {
            let mut dk = vec![T::zero(); xs.c * kk * kk];
            dk.par_chunks_mut(kk * kk).enumerate().for_each(|(c, dst)| {
                for n in 0..xs.n {
                    let pi = n * xs.c + c;
                    let src = &x.data()[pi * in_plane..][..in_plane];
                    let g = &dy.data()[pi * out_plane..][..out_plane];
                    for iy in 0..xs.h {
                        for ky in 0..kk {
                            let oy = (iy * f + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let grow = &g[oy as usize * ow..][..ow];
                            for ix in 0..xs.w {
                                let xv = src[iy * xs.w + ix];
                                for kx in 0..kk {
                                    let ox = (ix * f + kx) as isize - p as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    dst[ky * kk + kx] += xv * grow[ox as usize];
                                }
                            }
                        }
                    }
                }
            });
            Some(Tensor::from_vec(k.shape(), dk)?)
        } else {
            None
        };
        Ok(vec![dx, dk])
    }
}

/// Per-channel transposed convolution: each input pixel scatters `x * K` into a
/// window of the output spaced by the factor, then `f/2` is cropped per side.
/// The output is exactly `f` times the input size.
pub fn transposed_conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, spec: &DeconvSpec) -> Result<Var> {
    let spec = DeconvSpec::new(spec.channels, spec.factor)?;
    let xt = tape.get(x)?;
    let xs = xt.shape();
    if xs.c != spec.channels {
        return Err(Error::shape(format!(
            "transposed_conv2d expects {} channels, got {}",
            spec.channels, xs.c
        )));
    }
    let kt = tape.get(weight)?;
    if kt.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "transposed_conv2d weight {}, expected {}",
            kt.shape(),
            spec.weight_shape()
        )));
    }
    let f = spec.factor;
    let (kk, p) = (spec.kernel(), spec.pad());
    let (oh, ow) = (xs.h * f, xs.w * f);
    let out_shape = Shape { h: oh, w: ow, ..xs };
    let (in_plane, out_plane) = (xs.plane(), oh * ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(pi, dst)| {
        let c = pi % xs.c;
        let kern = &kt.data()[c * kk * kk..][..kk * kk];
        let src = &xt.data()[pi * in_plane..][..in_plane];
        for iy in 0..xs.h {
            for ky in 0..kk {
                let oy = (iy * f + ky) as isize - p as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                let drow = &mut dst[oy as usize * ow..][..ow];
                let krow = &kern[ky * kk..][..kk];
                for ix in 0..xs.w {
                    let xv = src[iy * xs.w + ix];
                    for (kx, &kv) in krow.iter().enumerate() {
                        let ox = (ix * f + kx) as isize - p as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        drow[ox as usize] += xv * kv;
                    }
                }
            }
        }
    });
    let out = Tensor::from_vec(out_shape, out)?;
    tape.push(&[x, weight], out, Box::new(DeconvRule { spec }))
}

/// 1-D bilinear taps `k[i] = 1 - |i + 0.5 - f| / f` for `i in 0..2f`.
pub fn bilinear_taps(f: usize) -> Result<Vec<f64>> {
    if f < 2 || f % 2 != 0 {
        return Err(Error::Parameter(format!("bilinear factor must be even and >= 2, got {f}")));
    }
    let ff = f as f64;
    Ok((0..2 * f).map(|i| 1.0 - (i as f64 + 0.5 - ff).abs() / ff).collect())
}

/// `(1, 1, 2f, 2f)` outer product of [`bilinear_taps`].
pub fn bilinear_kernel<T: Scalar>(f: usize) -> Result<Tensor<T>> {
    let k = bilinear_taps(f)?;
    let data = k
        .iter()
        .flat_map(|&a| k.iter().map(move |&b| T::from_f64_lossy(a * b)))
        .collect();
    Tensor::from_vec(Shape::new(1, 1, 2 * f, 2 * f)?, data)
}

/// Bilinear kernel replicated for every channel of a [`DeconvSpec`].
pub fn bilinear_weight<T: Scalar>(spec: &DeconvSpec) -> Result<Tensor<T>> {
    let k = bilinear_kernel::<T>(spec.factor)?;
    let data = (0..spec.channels).flat_map(|_| k.data().iter().copied()).collect();
    Tensor::from_vec(spec.weight_shape(), data)
}

struct ConcatRule {
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = dy.shape();
        let plane = s.plane();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (k, &c) in self.channels.iter().enumerate() {
            if needs[k] {
                let mut data = Vec::with_capacity(s.n * c * plane);
                for n in 0..s.n {
                    let start = (n * s.c + offset) * plane;
                    data.extend_from_slice(&dy.data()[start..start + c * plane]);
                }
                grads.push(Some(Tensor::from_vec(inputs[k].shape(), data)?));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        Ok(grads)
    }
}

/// Stacks inputs along the channel axis in the given order.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Parameter("concat_channels needs at least one input".into()))?;
    let base = tape.get(first)?.shape();
    let mut channels = Vec::with_capacity(inputs.len());
    for &v in inputs {
        let s = tape.get(v)?.shape();
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(Error::shape(format!("concat_channels: {s} incompatible with {base}")));
        }
        channels.push(s.c);
    }
    let total: usize = channels.iter().sum();
    let out_shape = Shape { c: total, ..base };
    let plane = base.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..base.n {
        for (&v, &c) in inputs.iter().zip(&channels) {
            let src = tape.value(v).data();
            data.extend_from_slice(&src[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let out = Tensor::from_vec(out_shape, data)?;
    tape.push(inputs, out, Box::new(ConcatRule { channels }))
}

struct SoftmaxCeRule<T> {
    probs: Tensor<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> Backward<T> for SoftmaxCeRule<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.probs.shape();
        let plane = s.plane();
        let scale = dy.data()[0] / T::from_usize_lossy(s.n * plane);
        let mut grad = self.probs.clone();
        let g = grad.data_mut();
        for n in 0..s.n {
            for i in 0..plane {
                let label = self.labels[n * plane + i] as usize;
                for c in 0..s.c {
                    let idx = (n * s.c + c) * plane + i;
                    let target = if c == label { T::one() } else { T::zero() };
                    g[idx] = (g[idx] - target) * scale;
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Mean per-pixel softmax cross-entropy over the channel axis.
///
/// `labels` holds one class index per pixel in (n, h, w) order. Returns the
/// scalar loss on the tape and the per-pixel class probabilities.
pub fn softmax_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<(Var, Tensor<T>)> {
    let z = tape.get(logits)?;
    let s = z.shape();
    let plane = s.plane();
    if s.c < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {}", s.c)));
    }
    if labels.len() != s.n * plane {
        return Err(Error::shape(format!(
            "{} labels for logits of shape {s}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= s.c) {
        return Err(Error::Dataset(format!("label {bad} outside 0..{}", s.c)));
    }
    let mut probs = Tensor::zeros(s);
    let mut total = 0.0f64;
    {
        let p = probs.data_mut();
        let zd = z.data();
        for n in 0..s.n {
            for i in 0..plane {
                let at = |c: usize| (n * s.c + c) * plane + i;
                let m = (0..s.c).map(|c| zd[at(c)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for c in 0..s.c {
                    let e = (zd[at(c)] - m).exp();
                    p[at(c)] = e;
                    denom += e;
                }
                for c in 0..s.c {
                    p[at(c)] /= denom;
                }
                let label = labels[n * plane + i] as usize;
                // -log p[label] = log(sum exp(z - m)) - (z[label] - m)
                total += (denom.ln() - (zd[at(label)] - m)).to_f64_lossy();
            }
        }
    }
    let loss = Tensor::scalar(T::from_f64_lossy(total / (s.n * plane) as f64));
    let rule = SoftmaxCeRule {
        probs: probs.clone(),
        labels: labels.to_vec(),
    };
    let var = tape.push(&[logits], loss, Box::new(rule))?;
    Ok((var, probs))
}
