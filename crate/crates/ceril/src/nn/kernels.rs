//! Raw numeric kernels shared by the graph ops and the inference paths.
//!
//! All loops accumulate in a fixed order so results are identical across
//! runs regardless of build flags.

use crate::scalar::Scalar;

/// Matrix multiply: out[B,O] += x[B,I] * w[I,O].
pub fn matmul_accum<S: Scalar>(x: &[S], w: &[S], out: &mut [S], b: usize, i: usize, o: usize) {
    debug_assert_eq!(x.len(), b * i);
    debug_assert_eq!(w.len(), i * o);
    debug_assert_eq!(out.len(), b * o);
    for row in 0..b {
        let x_row = &x[row * i..(row + 1) * i];
        let out_row = &mut out[row * o..(row + 1) * o];
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let w_row = &w[k * o..(k + 1) * o];
            for (ov, &wv) in out_row.iter_mut().zip(w_row.iter()) {
                *ov = *ov + xv * wv;
            }
        }
    }
}

/// out[B,I] += g[B,O] * w^T, with w stored [I,O].
pub fn matmul_grad_x<S: Scalar>(g: &[S], w: &[S], out: &mut [S], b: usize, i: usize, o: usize) {
    for row in 0..b {
        let g_row = &g[row * o..(row + 1) * o];
        let out_row = &mut out[row * i..(row + 1) * i];
        for k in 0..i {
            let w_row = &w[k * o..(k + 1) * o];
            let mut acc = S::zero();
            for (gv, wv) in g_row.iter().zip(w_row.iter()) {
                acc = acc + *gv * *wv;
            }
            out_row[k] = out_row[k] + acc;
        }
    }
}

/// dw[I,O] += x^T[B,I] * g[B,O].
pub fn matmul_grad_w<S: Scalar>(x: &[S], g: &[S], dw: &mut [S], b: usize, i: usize, o: usize) {
    for row in 0..b {
        let x_row = &x[row * i..(row + 1) * i];
        let g_row = &g[row * o..(row + 1) * o];
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let dw_row = &mut dw[k * o..(k + 1) * o];
            for (dv, &gv) in dw_row.iter_mut().zip(g_row.iter()) {
                *dv = *dv + xv * gv;
            }
        }
    }
}

/// Shapes of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than input");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Valid output-x range for a kernel column: ox with
    /// 0 <= ox*stride + kx - pad < w.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let max_ix = self.w + self.pad - 1;
        let hi = if max_ix >= kx {
            (((max_ix - kx) / self.stride) + 1).min(self.w_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Direct 2D convolution: out[B,Co,Ho,Wo] += k * x.
pub fn conv2d_accum<S: Scalar>(x: &[S], kernel: &[S], out: &mut [S], d: &ConvDims) {
    debug_assert_eq!(x.len(), d.in_len());
    debug_assert_eq!(kernel.len(), d.kernel_len());
    debug_assert_eq!(out.len(), d.out_len());
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + co) * plane_out..(b * d.c_out + co + 1) * plane_out];
            for ci in 0..d.c_in {
                let in_plane = &x[(b * d.c_in + ci) * plane_in..(b * d.c_in + ci + 1) * plane_in];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kernel[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = d.ox_range(kx);
                        for oy in 0..d.h_out {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let in_row = &in_plane[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                            let out_row = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            if d.stride == 1 {
                                let i0 = ox_lo + kx - d.pad;
                                let len = ox_hi - ox_lo;
                                let src = &in_row[i0..i0 + len];
                                let dst = &mut out_row[ox_lo..ox_hi];
                                for (ov, &iv) in dst.iter_mut().zip(src.iter()) {
                                    *ov = *ov + wv * iv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * d.stride + kx - d.pad;
                                    out_row[ox] = out_row[ox] + wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. the input: dx += g (*) flipped kernel.
pub fn conv2d_grad_x<S: Scalar>(g: &[S], kernel: &[S], dx: &mut [S], d: &ConvDims) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let dx_plane = &mut dx[(b * d.c_in + ci) * plane_in..(b * d.c_in + ci + 1) * plane_in];
            for co in 0..d.c_out {
                let g_plane = &g[(b * d.c_out + co) * plane_out..(b * d.c_out + co + 1) * plane_out];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kernel[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = d.ox_range(kx);
                        for oy in 0..d.h_out {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let g_row = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            let dx_row =
                                &mut dx_plane[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.pad;
                                dx_row[ix] = dx_row[ix] + wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. the kernel.
pub fn conv2d_grad_k<S: Scalar>(x: &[S], g: &[S], dk: &mut [S], d: &ConvDims) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = d.ox_range(kx);
                    let mut acc = S::zero();
                    for b in 0..d.batch {
                        let in_plane =
                            &x[(b * d.c_in + ci) * plane_in..(b * d.c_in + ci + 1) * plane_in];
                        let g_plane =
                            &g[(b * d.c_out + co) * plane_out..(b * d.c_out + co + 1) * plane_out];
                        for oy in 0..d.h_out {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let in_row = &in_plane[(iy - d.pad) * d.w..(iy - d.pad + 1) * d.w];
                            let g_row = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.pad;
                                acc = acc + in_row[ix] * g_row[ox];
                            }
                        }
                    }
                    let idx = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                    dk[idx] = dk[idx] + acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference convolution used as the kernel oracle.
    fn conv_reference(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.out_len()];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if iy >= 0
                                        && (iy as usize) < d.h
                                        && ix >= 0
                                        && (ix as usize) < d.w
                                    {
                                        acc += x[((b * d.c_in + ci) * d.h + iy as usize) * d.w
                                            + ix as usize]
                                            * k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * d.c_out + co) * d.h_out + oy) * d.w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_reference_across_configs() {
        for (stride, pad, kh) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 5), (4, 0, 8)] {
            let h = 12;
            let w = 12;
            if h + 2 * pad < kh {
                continue;
            }
            let d = ConvDims::new(2, 3, h, w, 4, kh, kh, stride, pad);
            let x = pseudo_random(d.in_len(), 7);
            let k = pseudo_random(d.kernel_len(), 13);
            let mut out = vec![0.0; d.out_len()];
            conv2d_accum(&x, &k, &mut out, &d);
            let expected = conv_reference(&x, &k, &d);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let d = ConvDims::new(1, 1, 6, 6, 1, 1, 1, 1, 0);
        let x = pseudo_random(d.in_len(), 3);
        let k = vec![1.0];
        let mut out = vec![0.0; d.out_len()];
        conv2d_accum(&x, &k, &mut out, &d);
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_small_case() {
        // [1,2] x [2,2]
        let x = vec![2.0, 3.0];
        let w = vec![1.0, 0.5, -1.0, 2.0];
        let mut out = vec![0.0; 2];
        matmul_accum(&x, &w, &mut out, 1, 2, 2);
        assert_eq!(out, vec![2.0 - 3.0, 1.0 + 6.0]);
    }
}
