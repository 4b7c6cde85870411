//! Forward and backward kernels for the detector's layer types.

use super::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Same-padded convolution with a square `k × k` kernel (k odd).
/// Weights are laid out `[cout][cin][k][k]`.
pub fn conv2d(x: &Tensor4, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize) -> Tensor4 {
    let (n, cin, h, w) = x.dims();
    debug_assert_eq!(weight.len(), cout * cin * k * k);
    let pad = (k / 2) as isize;
    let mut y = Tensor4::zeros(n, cout, h, w);
    for b in 0..n {
        for co in 0..cout {
            let out = y.plane_mut(b, co);
            if let Some(bias) = bias {
                out.fill(bias[co]);
            }
            for ci in 0..cin {
                let inp = x.plane(b, ci);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(w, dx);
                        for oy in valid_rows(h, dy) {
                            let iy = (oy as isize + dy) as usize;
                            let orow = &mut out[oy * w + x0..oy * w + x1];
                            let start = (iy * w) as isize + x0 as isize + dx;
                            let irow = &inp[start as usize..start as usize + (x1 - x0)];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Output columns `[x0, x1)` whose input column `x + dx` is in bounds.
#[inline]
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(0) as usize;
    (x0.min(x1), x1)
}

#[inline]
fn valid_rows(h: usize, dy: isize) -> std::ops::Range<usize> {
    let (a, b) = valid_range(h, dy);
    a..b
}

pub struct ConvGrads {
    pub dx: Tensor4,
    pub dweight: Vec<f64>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv2d_backward(x: &Tensor4, weight: &[f64], dy: &Tensor4, k: usize, with_bias: bool) -> ConvGrads {
    let (n, cin, h, w) = x.dims();
    let cout = dy.c;
    let pad = (k / 2) as isize;
    let mut dx = Tensor4::zeros(n, cin, h, w);
    let mut dweight = vec![0.0; weight.len()];
    let mut dbias = with_bias.then(|| vec![0.0; cout]);
    for b in 0..n {
        for co in 0..cout {
            let g = dy.plane(b, co);
            if let Some(db) = dbias.as_mut() {
                db[co] += g.iter().sum::<f64>();
            }
            for ci in 0..cin {
                let inp = x.plane(b, ci);
                for ky in 0..k {
                    let ddy = ky as isize - pad;
                    for kx in 0..k {
                        let ddx = kx as isize - pad;
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (x0, x1) = valid_range(w, ddx);
                        let mut acc = 0.0;
                        let dxp = dx.plane_mut(b, ci);
                        for oy in valid_rows(h, ddy) {
                            let iy = (oy as isize + ddy) as usize;
                            let grow = &g[oy * w + x0..oy * w + x1];
                            let start = ((iy * w) as isize + x0 as isize + ddx) as usize;
                            let irow = &inp[start..start + (x1 - x0)];
                            let drow = &mut dxp[start..start + (x1 - x0)];
                            for ((gv, iv), dv) in grow.iter().zip(irow).zip(drow.iter_mut()) {
                                acc += gv * iv;
                                *dv += wv * gv;
                            }
                        }
                        dweight[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Batch normalization with statistics over (n, h, w) of each channel.
pub fn batchnorm_train(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> (Tensor4, BnCache) {
    let (n, c, _, _) = x.dims();
    let count = n * x.plane_len();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).map(|b| x.plane(b, ch).iter().sum::<f64>()).sum();
        let m = s / count as f64;
        let ss: f64 = (0..n)
            .map(|b| x.plane(b, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum();
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (xh, yv) in xhat.plane_mut(b, ch).iter_mut().zip(y.plane_mut(b, ch).iter_mut()) {
                *xh = (*xh - m) * is;
                *yv = g * *xh + be;
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

pub fn batchnorm_eval(x: &Tensor4, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> Tensor4 {
    let mut y = x.clone();
    for b in 0..x.n {
        for ch in 0..x.c {
            let is = 1.0 / (running_var[ch] + BN_EPS).sqrt();
            let (m, g, be) = (running_mean[ch], gamma[ch], beta[ch]);
            for v in y.plane_mut(b, ch) {
                *v = g * (*v - m) * is + be;
            }
        }
    }
    y
}

/// `running = momentum · running + (1 − momentum) · batch`; the variance
/// uses the unbiased batch estimate when more than one sample contributes.
pub fn update_running_stats(cache: &BnCache, running_mean: &mut [f64], running_var: &mut [f64]) {
    let unbias = if cache.count > 1 {
        cache.count as f64 / (cache.count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = BN_MOMENTUM * running_mean[ch] + (1.0 - BN_MOMENTUM) * cache.mean[ch];
        running_var[ch] = BN_MOMENTUM * running_var[ch] + (1.0 - BN_MOMENTUM) * cache.var[ch] * unbias;
    }
}

pub fn batchnorm_backward(dy: &Tensor4, cache: &BnCache, gamma: &[f64]) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (n, c, _, _) = dy.dims();
    let count = cache.count as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            for (g, xh) in dy.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = dy.clone();
    for ch in 0..c {
        // dxhat = dy·γ; dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
        let sum_dxhat = dbeta[ch] * gamma[ch];
        let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
        let k = cache.inv_std[ch] / count;
        for b in 0..n {
            let xh = cache.xhat.plane(b, ch);
            for (d, x) in dx.plane_mut(b, ch).iter_mut().zip(xh) {
                *d = k * (count * *d * gamma[ch] - sum_dxhat - x * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace(x: &mut Tensor4) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward(dy: &Tensor4, out: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2×2 max pooling with stride 2; records the flat argmax of each window.
pub fn maxpool2(x: &Tensor4) -> (Tensor4, Vec<usize>) {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros(n, c, oh, ow);
    let mut arg = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let obase = (b * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    y.data[obase + oy * ow + ox] = x.data[best];
                    arg[obase + oy * ow + ox] = best;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(dy: &Tensor4, argmax: &[usize], input_dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = input_dims;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (g, &idx) in dy.data.iter().zip(argmax) {
        dx.data[idx] += g;
    }
    dx
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let mut y = Tensor4::zeros(n, c, 2 * h, 2 * w);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor4) -> Tensor4 {
    let (n, c, h2, w2) = dy.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut y = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for ch in 0..a.c {
            y.plane_mut(n, ch).copy_from_slice(a.plane(n, ch));
        }
        for ch in 0..b.c {
            y.plane_mut(n, a.c + ch).copy_from_slice(b.plane(n, ch));
        }
    }
    y
}

/// Splits a gradient of `concat(a, b)` back into its parts.
pub fn concat_backward(dy: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let cb = dy.c - ca;
    let mut da = Tensor4::zeros(dy.n, ca, dy.h, dy.w);
    let mut db = Tensor4::zeros(dy.n, cb, dy.h, dy.w);
    for n in 0..dy.n {
        for ch in 0..ca {
            da.plane_mut(n, ch).copy_from_slice(dy.plane(n, ch));
        }
        for ch in 0..cb {
            db.plane_mut(n, ch).copy_from_slice(dy.plane(n, ca + ch));
        }
    }
    (da, db)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
