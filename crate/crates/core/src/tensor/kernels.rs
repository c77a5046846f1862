//! Primitive forward and backward kernels on raw slices.

use super::Scalar;

pub const NORM_EPS: f64 = 1e-5;

/// Output positions `[lo, hi)` whose source index `o * stride + offset` lands in `[0, len)`.
fn span(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

pub fn conv_out(n: usize, kernel: usize, stride: usize) -> usize {
    (n + 2 * (kernel / 2) - kernel) / stride + 1
}

pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    fn out_hw(&self) -> (usize, usize) {
        (conv_out(self.h, self.kernel, self.stride), conv_out(self.w, self.kernel, self.stride))
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], cs: &ConvShape) -> Vec<T> {
    let (ho, wo) = cs.out_hw();
    let (k, s, pad) = (cs.kernel, cs.stride, (cs.kernel / 2) as isize);
    let in_plane = cs.h * cs.w;
    let out_plane = ho * wo;
    let mut y = vec![T::zero(); cs.batch * cs.out_ch * out_plane];
    for n in 0..cs.batch {
        for o in 0..cs.out_ch {
            let out = &mut y[(n * cs.out_ch + o) * out_plane..][..out_plane];
            out.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..cs.in_ch {
                let inp = &x[(n * cs.in_ch + c) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = span(ho, cs.h, s, ky as isize - pad);
                    for kx in 0..k {
                        let wv = w[((o * cs.in_ch + c) * k + ky) * k + kx];
                        let off = kx as isize - pad;
                        let (ox_lo, ox_hi) = span(wo, cs.w, s, off);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + ky as isize - pad;
                            let in_row = &inp[iy as usize * cs.w..][..cs.w];
                            let out_row = &mut out[oy * wo..][..wo];
                            if s == 1 {
                                let src = &in_row[(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
                                for (d, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[((ox * s) as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    cs: &ConvShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = cs.out_hw();
    let (k, s, pad) = (cs.kernel, cs.stride, (cs.kernel / 2) as isize);
    let in_plane = cs.h * cs.w;
    let out_plane = ho * wo;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cs.out_ch];
    for n in 0..cs.batch {
        for o in 0..cs.out_ch {
            let g = &dy[(n * cs.out_ch + o) * out_plane..][..out_plane];
            db[o] += g.iter().copied().sum::<T>();
            for c in 0..cs.in_ch {
                let base = (n * cs.in_ch + c) * in_plane;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = span(ho, cs.h, s, ky as isize - pad);
                    for kx in 0..k {
                        let widx = ((o * cs.in_ch + c) * k + ky) * k + kx;
                        let wv = w[widx];
                        let off = kx as isize - pad;
                        let (ox_lo, ox_hi) = span(wo, cs.w, s, off);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + ky as isize - pad) as usize;
                            let g_row = &g[oy * wo..][..wo];
                            let row = base + iy * cs.w;
                            if s == 1 {
                                let a = (ox_lo as isize + off) as usize;
                                let b = (ox_hi as isize + off) as usize;
                                let x_row = &x[row + a..row + b];
                                let gs = &g_row[ox_lo..ox_hi];
                                for (&gv, &xv) in gs.iter().zip(x_row) {
                                    acc += gv * xv;
                                }
                                for (d, &gv) in dx[row + a..row + b].iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * s) as isize + off) as usize;
                                    acc += g_row[ox] * x[row + ix];
                                    dx[row + ix] += wv * g_row[ox];
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); batch * out];
    for n in 0..batch {
        let xr = &x[n * inp..][..inp];
        for o in 0..out {
            let wr = &w[o * inp..][..inp];
            let mut acc = b[o];
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc += wv * xv;
            }
            y[n * out + o] = acc;
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    inp: usize,
    out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); batch * inp];
    let mut dw = vec![T::zero(); out * inp];
    let mut db = vec![T::zero(); out];
    for n in 0..batch {
        let xr = &x[n * inp..][..inp];
        let dxr = &mut dx[n * inp..][..inp];
        for o in 0..out {
            let g = dy[n * out + o];
            db[o] += g;
            let wr = &w[o * inp..][..inp];
            let dwr = &mut dw[o * inp..][..inp];
            for i in 0..inp {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (dx, dw, db)
}

/// `(batch, channels, spatial)` of a `[N, C, ...]` shape.
pub fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Per-channel batch mean and biased variance.
pub fn channel_stats<T: Scalar>(x: &[T], shape: &[usize]) -> (Vec<T>, Vec<T>) {
    let (n, c, s) = channel_dims(shape);
    let m = T::cast((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += x[(b * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * s..][..s] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}

pub fn channel_affine<T: Scalar>(
    x: &[T],
    shape: &[usize],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let (n, c, s) = channel_dims(shape);
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let off = (b * c + ch) * s;
            for (d, &v) in y[off..off + s].iter_mut().zip(&x[off..off + s]) {
                *d = v * scale + shift;
            }
        }
    }
    y
}

/// Backward of train-mode normalization. Returns `(dx, dgamma, dbeta)`.
pub fn channel_norm_backward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = channel_dims(shape);
    let m = T::cast((n * s) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xhat = (x[i] - mean[ch]) * inv_std[ch];
                sum_g += dy[i];
                sum_gx += dy[i] * xhat;
            }
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        let k = gamma[ch] * inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xhat = (x[i] - mean[ch]) * inv_std[ch];
                dx[i] = k * (m * dy[i] - sum_g - xhat * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn global_avg_pool<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, s) = channel_dims(shape);
    let inv = T::cast(1.0 / s as f64);
    (0..n * c).map(|i| x[i * s..][..s].iter().copied().sum::<T>() * inv).collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, s) = channel_dims(shape);
    let inv = T::cast(1.0 / s as f64);
    let mut dx = Vec::with_capacity(n * c * s);
    for &g in dy {
        dx.extend(std::iter::repeat(g * inv).take(s));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a same-padded convolution.
    fn conv_reference(x: &[f64], w: &[f64], b: &[f64], cs: &ConvShape) -> Vec<f64> {
        let (ho, wo) = (conv_out(cs.h, cs.kernel, cs.stride), conv_out(cs.w, cs.kernel, cs.stride));
        let pad = (cs.kernel / 2) as isize;
        let mut y = Vec::new();
        for n in 0..cs.batch {
            for o in 0..cs.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..cs.in_ch {
                            for ky in 0..cs.kernel {
                                for kx in 0..cs.kernel {
                                    let iy = (oy * cs.stride) as isize + ky as isize - pad;
                                    let ix = (ox * cs.stride) as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= cs.h as isize || ix >= cs.w as isize {
                                        continue;
                                    }
                                    acc += w[((o * cs.in_ch + c) * cs.kernel + ky) * cs.kernel + kx]
                                        * x[((n * cs.in_ch + c) * cs.h + iy as usize) * cs.w + ix as usize];
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + seed).sin() * 1.3).collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        for (kernel, stride, h, w) in [(3, 1, 5, 4), (3, 2, 7, 6), (1, 1, 3, 3), (3, 2, 1, 2), (3, 1, 1, 1)] {
            let cs = ConvShape { batch: 2, in_ch: 3, out_ch: 2, h, w, kernel, stride };
            let x = ramp(2 * 3 * h * w, 0.1);
            let wt = ramp(2 * 3 * kernel * kernel, 0.7);
            let b = vec![0.25, -0.5];
            let got = conv2d_forward(&x, &wt, &b, &cs);
            let want = conv_reference(&x, &wt, &b, &cs);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "k{kernel} s{stride} {h}x{w}");
            }
        }
    }

    #[test]
    fn stride_two_halves() {
        assert_eq!(conv_out(32, 3, 2), 16);
        assert_eq!(conv_out(7, 3, 2), 4);
        assert_eq!(conv_out(32, 3, 1), 32);
        assert_eq!(conv_out(5, 1, 1), 5);
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = vec![2.5f64; 2 * 3 * 4];
        let y = global_avg_pool(&x, &[2, 3, 2, 2]);
        assert!(y.iter().all(|&v| v == 2.5));
    }
}
