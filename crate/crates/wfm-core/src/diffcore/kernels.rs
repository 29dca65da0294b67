//! Dense numeric kernels shared by the forward and backward passes.
//!
//! Everything here is direct (no im2col, no FFT) so results are bit-stable
//! given a fixed iteration order.

use super::real::Real;

/// `out[n,o] = b[o] + sum_i x[n,i] * w[i,o]`
pub fn dense_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    i_dim: usize,
    o_dim: usize,
    out: &mut [T],
) {
    for row in 0..n {
        let xr = &x[row * i_dim..(row + 1) * i_dim];
        let or = &mut out[row * o_dim..(row + 1) * o_dim];
        or.copy_from_slice(b);
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * o_dim..(i + 1) * o_dim];
            for (o, &wv) in wr.iter().enumerate() {
                or[o] += xv * wv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    n: usize,
    i_dim: usize,
    o_dim: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for row in 0..n {
        let gr = &g[row * o_dim..(row + 1) * o_dim];
        let xr = &x[row * i_dim..(row + 1) * i_dim];
        for (o, &gv) in gr.iter().enumerate() {
            db[o] += gv;
        }
        for i in 0..i_dim {
            let wr = &w[i * o_dim..(i + 1) * o_dim];
            let dwr = &mut dw[i * o_dim..(i + 1) * o_dim];
            let xv = xr[i];
            let mut acc = T::zero();
            for (o, &gv) in gr.iter().enumerate() {
                acc += gv * wr[o];
                dwr[o] += xv * gv;
            }
            dx[row * i_dim + i] += acc;
        }
    }
}

/// Output spatial size of a zero-padded strided convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Direct NCHW convolution. `w` is `[O,C,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    for img in 0..n {
        for o in 0..c_out {
            let wo = &w[o * c_in * kh * kw..(o + 1) * c_in * kh * kw];
            let out_base = (img * c_out + o) * oh * ow;
            for y in 0..oh {
                for xcol in 0..ow {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        let xc = &x[(img * c_in + c) * h * wdt..(img * c_in + c + 1) * h * wdt];
                        let wc = &wo[c * kh * kw..(c + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xc[iy as usize * wdt..(iy as usize + 1) * wdt];
                            let wrow = &wc[ky * kw..(ky + 1) * kw];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = (xcol * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                acc += xrow[ix as usize] * wv;
                            }
                        }
                    }
                    out[out_base + y * ow + xcol] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for img in 0..n {
        for o in 0..c_out {
            let wo = &w[o * c_in * kh * kw..(o + 1) * c_in * kh * kw];
            let dwo = &mut dw[o * c_in * kh * kw..(o + 1) * c_in * kh * kw];
            let g_base = (img * c_out + o) * oh * ow;
            for y in 0..oh {
                for xcol in 0..ow {
                    let gv = g[g_base + y * ow + xcol];
                    if gv == T::zero() {
                        continue;
                    }
                    db[o] += gv;
                    for c in 0..c_in {
                        let x_base = (img * c_in + c) * h * wdt;
                        let wc = &wo[c * kh * kw..(c + 1) * kh * kw];
                        let dwc = &mut dwo[c * kh * kw..(c + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xcol * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wdt as isize {
                                    continue;
                                }
                                let xi = x_base + iy as usize * wdt + ix as usize;
                                dx[xi] += gv * wc[ky * kw + kx];
                                dwc[ky * kw + kx] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise same-size correlation with a small odd kernel, zero padding.
pub fn blur_channel<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    kernel: &[T],
    ksize: usize,
    out: &mut [T],
) {
    let half = (ksize / 2) as isize;
    for y in 0..h as isize {
        for xcol in 0..w as isize {
            let mut acc = T::zero();
            for ky in 0..ksize as isize {
                let iy = y + ky - half;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..ksize as isize {
                    let ix = xcol + kx - half;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += x[(iy * w as isize + ix) as usize]
                        * kernel[(ky * ksize as isize + kx) as usize];
                }
            }
            out[(y * w as isize + xcol) as usize] = acc;
        }
    }
}

/// Orthonormal 8-point DCT-II basis, `c[u*8 + x]`.
pub fn dct8_basis<T: Real>() -> [T; 64] {
    let mut c = [T::zero(); 64];
    for u in 0..8 {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for x in 0..8 {
            let v = alpha * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
            c[u * 8 + x] = T::from_f64(v);
        }
    }
    c
}

/// Zigzag rank of each (row-major) coefficient of an 8x8 block. Rank 0 is DC.
pub fn zigzag_ranks() -> [usize; 64] {
    let mut rank = [0usize; 64];
    let mut next = 0usize;
    for s in 0..15i32 {
        if s % 2 == 0 {
            let r0 = s.min(7);
            let (mut r, mut c) = (r0, s - r0);
            while r >= 0 && c <= 7 {
                rank[(r * 8 + c) as usize] = next;
                next += 1;
                r -= 1;
                c += 1;
            }
        } else {
            let c0 = s.min(7);
            let (mut r, mut c) = (s - c0, c0);
            while c >= 0 && r <= 7 {
                rank[(r * 8 + c) as usize] = next;
                next += 1;
                r += 1;
                c -= 1;
            }
        }
    }
    rank
}

/// Block DCT -> zigzag truncation -> inverse DCT over one channel plane.
///
/// The plane is zero-padded on the bottom/right to a multiple of 8 and the
/// result cropped back. The map is linear and self-adjoint, so the backward
/// pass reuses it on the upstream gradient.
pub fn jpeg_channel<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    keep: usize,
    basis: &[T; 64],
    ranks: &[usize; 64],
    out: &mut [T],
) {
    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    let mut block = [T::zero(); 64];
    let mut tmp = [T::zero(); 64];
    let mut coef = [T::zero(); 64];
    for by in 0..bh {
        for bx in 0..bw {
            // load with zero padding
            for r in 0..8 {
                for c in 0..8 {
                    let (iy, ix) = (by * 8 + r, bx * 8 + c);
                    block[r * 8 + c] = if iy < h && ix < w {
                        x[iy * w + ix]
                    } else {
                        T::zero()
                    };
                }
            }
            // coef = C * block * C^T
            mat8_mul(basis, &block, &mut tmp);
            mat8_mul_bt(&tmp, basis, &mut coef);
            for i in 0..64 {
                if ranks[i] >= keep {
                    coef[i] = T::zero();
                }
            }
            // block = C^T * coef * C
            mat8_tmul(basis, &coef, &mut tmp);
            mat8_mul(&tmp, basis, &mut block);
            for r in 0..8 {
                for c in 0..8 {
                    let (iy, ix) = (by * 8 + r, bx * 8 + c);
                    if iy < h && ix < w {
                        out[iy * w + ix] = block[r * 8 + c];
                    }
                }
            }
        }
    }
}

/// `out = a * b` for 8x8 matrices.
fn mat8_mul<T: Real>(a: &[T], b: &[T], out: &mut [T; 64]) {
    for r in 0..8 {
        for c in 0..8 {
            let mut acc = T::zero();
            for k in 0..8 {
                acc += a[r * 8 + k] * b[k * 8 + c];
            }
            out[r * 8 + c] = acc;
        }
    }
}

/// `out = a * b^T` for 8x8 matrices.
fn mat8_mul_bt<T: Real>(a: &[T], b: &[T], out: &mut [T; 64]) {
    for r in 0..8 {
        for c in 0..8 {
            let mut acc = T::zero();
            for k in 0..8 {
                acc += a[r * 8 + k] * b[c * 8 + k];
            }
            out[r * 8 + c] = acc;
        }
    }
}

/// `out = a^T * b` for 8x8 matrices.
fn mat8_tmul<T: Real>(a: &[T], b: &[T], out: &mut [T; 64]) {
    for r in 0..8 {
        for c in 0..8 {
            let mut acc = T::zero();
            for k in 0..8 {
                acc += a[k * 8 + r] * b[k * 8 + c];
            }
            out[r * 8 + c] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_starts_at_dc_and_covers_all() {
        let ranks = zigzag_ranks();
        assert_eq!(ranks[0], 0);
        assert_eq!(ranks[1], 1); // (0,1)
        assert_eq!(ranks[8], 2); // (1,0)
        assert_eq!(ranks[16], 3); // (2,0)
        let mut seen = [false; 64];
        for &r in &ranks {
            seen[r] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn dct_roundtrip_is_identity() {
        let basis = dct8_basis::<f64>();
        let ranks = zigzag_ranks();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; 64];
        jpeg_channel(&x, 8, 8, 64, &basis, &ranks, &mut out);
        for (a, b) in x.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_keep_one_preserves_constant() {
        let basis = dct8_basis::<f64>();
        let ranks = zigzag_ranks();
        let x = vec![0.42; 16 * 16];
        let mut out = vec![0.0; 16 * 16];
        jpeg_channel(&x, 16, 16, 1, &basis, &ranks, &mut out);
        for v in &out {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
