//! Raw numeric kernels shared by the forward and backward passes.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked
    // above in debug builds and guaranteed by every caller), and the strides
    // describe in-bounds row-major layouts of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a zero-padded `(cin, h, w)` map into `(cin·k·k, h·w)` columns
/// for a same-padded convolution.
pub fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let shift = kj as isize - pad as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst_row[xo] = src_row[(xo as isize + shift) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input map.
pub fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kj as isize - pad as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        plane[sy as usize * w + (xo as isize + shift) as usize] += src[y * w + xo];
                    }
                }
            }
        }
    }
    x
}

/// Bilinear tap for one coordinate along an axis of extent `n`: the clamped
/// coordinate is split into `(i0, i1, frac, inside)`; `inside` is false when
/// clamping was active, which zeroes the coordinate derivative.
#[inline]
pub fn bilinear_tap(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    if n == 1 {
        return (0, 0, 0.0, inside);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

pub fn pixel_shuffle(x: &[f64], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; c_out * ho * wo];
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src = &x[((c * r + i) * r + j) * h * w..][..h * w];
                for y in 0..h {
                    let dst_row = (c * ho + y * r + i) * wo;
                    for xx in 0..w {
                        out[dst_row + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse rearrangement of [`pixel_shuffle`] (space-to-depth).
pub fn pixel_unshuffle(x: &[f64], c_out: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; c_out * r * r * h * w];
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let dst = &mut out[((c * r + i) * r + j) * h * w..][..h * w];
                for y in 0..h {
                    let src_row = (c * ho + y * r + i) * wo;
                    for xx in 0..w {
                        dst[y * w + xx] = x[src_row + xx * r + j];
                    }
                }
            }
        }
    }
    out
}
