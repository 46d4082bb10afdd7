//! Slice-level kernels behind the tape operations.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

/// Output extent of a strided window, `None` when the window does not fit.
pub(crate) fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let k = g.patch_len();
    let n = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
        let y = &mut out[b * g.out_sample()..(b + 1) * g.out_sample()];
        if let Some(bias) = bias {
            for (o, row) in y.chunks_exact_mut(n).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.out_channels, k, n, T::one(), weight, k as isize, 1, &cols, n as isize, 1, beta, y, n as isize, 1);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let k = g.patch_len();
    let n = g.out_plane();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_channels * k]);
    let mut db = need_db.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        let dy = &dout[b * g.out_sample()..(b + 1) * g.out_sample()];
        if let Some(db) = db.as_mut() {
            for (o, row) in dy.chunks_exact(n).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
            // dw += dy (Cout x N) * cols^T (N x K)
            T::gemm(g.out_channels, n, k, T::one(), dy, n as isize, 1, &cols, 1, n as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T (K x Cout) * dy (Cout x N)
            T::gemm(k, g.out_channels, n, T::one(), weight, 1, k as isize, dy, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
            col2im(&cols, g, &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()]);
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns pooled values and, per output, the flat in-plane index of the winner.
/// Ties resolve to the first maximum in row-major window order.
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let out_plane = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(g.planes * out_plane);
    let mut argmax = Vec::with_capacity(g.planes * out_plane);
    for p in 0..g.planes {
        let plane = &x[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.kernel {
                        let idx = iy * g.width + ox * g.stride + kx;
                        let v = plane[idx];
                        if v > best || (ky == 0 && kx == 0) {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward<T: Scalar>(dout: &[T], argmax: &[u32], g: &PoolGeom) -> Vec<T> {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let mut dx = vec![T::zero(); g.planes * in_plane];
    for p in 0..g.planes {
        for o in 0..out_plane {
            let i = p * out_plane + o;
            dx[p * in_plane + argmax[i] as usize] += dout[i];
        }
    }
    dx
}

pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::lit((g.kernel * g.kernel) as f64);
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let plane = &x[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * g.width + ox * g.stride;
                    for v in &plane[row..row + g.kernel] {
                        acc += *v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(dout: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::lit((g.kernel * g.kernel) as f64);
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let mut dx = vec![T::zero(); g.planes * in_plane];
    for p in 0..g.planes {
        let plane = &mut dx[p * in_plane..(p + 1) * in_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = dout[p * out_plane + oy * g.out_w + ox] * inv;
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * g.width + ox * g.stride;
                    for v in &mut plane[row..row + g.kernel] {
                        *v += d;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_sample()];
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                    let wv = w[((o * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let (h, w, k) = (7, 6, 3);
            let out_h = window_extent(h, k, stride, padding).unwrap();
            let out_w = window_extent(w, k, stride, padding).unwrap();
            let g = ConvGeom {
                batch: 2,
                in_channels: 3,
                height: h,
                width: w,
                out_channels: 4,
                kh: k,
                kw: k,
                stride,
                padding,
                out_h,
                out_w,
            };
            let x: Vec<f64> = (0..g.batch * g.in_sample()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.out_channels * g.patch_len()).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            assert_eq!(fast, slow, "stride {stride} padding {padding}");
        }
    }

    #[test]
    fn window_extent_arithmetic() {
        assert_eq!(window_extent(32, 3, 1, 1), Some(32));
        assert_eq!(window_extent(32, 3, 2, 1), Some(16));
        assert_eq!(window_extent(32, 2, 2, 0), Some(16));
        assert_eq!(window_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn max_pool_first_max_wins_ties() {
        let g = PoolGeom { planes: 1, height: 2, width: 2, kernel: 2, stride: 2, out_h: 1, out_w: 1 };
        let (v, idx) = max_pool_forward(&[1.0f64, 3.0, 3.0, 0.0], &g);
        assert_eq!(v, vec![3.0]);
        assert_eq!(idx, vec![1]);
    }
}
