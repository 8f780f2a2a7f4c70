//! Direct nested-loop reference implementations, written from the operator
//! definitions with no shared code from the library kernels.

use skinseg_core::{Shape, Tensor};

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ic, h, wd] = x.shape().dims();
    let [oc, wic, kh, kw] = w.shape().dims();
    assert_eq!(ic, wic);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    let mut k = 0;
    for bn in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(o, i, ky, kx) * x.at(bn, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[k] = acc;
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, oc, oh, ow).unwrap(), out).unwrap()
}

pub fn maxpool2(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(bn, ch, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow).unwrap(), out).unwrap()
}

/// Per-channel transposed convolution: scatter every input pixel times the
/// 2f x 2f kernel into a stride-f grid, then crop f/2 from each side.
pub fn transposed_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().dims();
    let k = 2 * f;
    let (fh, fw) = ((h - 1) * f + k, (wd - 1) * f + k);
    let mut full = vec![0.0; n * c * fh * fw];
    for bn in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(bn, ch, iy, ix);
                    for ky in 0..k {
                        for kx in 0..k {
                            full[((bn * c + ch) * fh + iy * f + ky) * fw + ix * f + kx] += v * w.at(ch, 0, ky, kx);
                        }
                    }
                }
            }
        }
    }
    let (oh, ow, p) = (h * f, wd * f, f / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(full[(plane * fh + y + p) * fw + x + p]);
            }
        }
    }
    Tensor::from_vec(Shape::new(n, c, oh, ow).unwrap(), out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    // NaN counts as an infinite difference instead of vanishing inside max.
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if (x - y).is_nan() { f64::INFINITY } else { (x - y).abs() })
        .fold(0.0, f64::max)
}
