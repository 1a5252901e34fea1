//! Shared numeric kernels.
//!
//! Every compute-heavy routine lives here exactly once: the autodiff tape,
//! the plain inference path and the frozen encoder all call through these
//! functions, so the two execution paths produce bit-identical values for
//! identical inputs. The matmul microkernel is register-tiled (4 rows × 16
//! columns) so the compiler can keep the accumulators in vector registers;
//! per-row accumulation order is fixed and independent of the tiling, which
//! is what makes row-sliced (tiled) inference bitwise equal to monolithic.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `C = A · B` with `A: m×k`, `B: k×n`, all row-major.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    let mut j0 = 0;
    while j0 + NR <= n {
        let mut i0 = 0;
        while i0 + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let brow = &b[kk * n + j0..kk * n + j0 + NR];
                for r in 0..MR {
                    let av = a[(i0 + r) * k + kk];
                    let dst = &mut acc[r];
                    for (d, &bv) in dst.iter_mut().zip(brow.iter()) {
                        *d = *d + av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
            i0 += MR;
        }
        for i in i0..m {
            let mut acc = [T::zero(); NR];
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * n + j0..kk * n + j0 + NR];
                for (d, &bv) in acc.iter_mut().zip(brow.iter()) {
                    *d = *d + av * bv;
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
        j0 += NR;
    }
    if j0 < n {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for j in j0..n {
                    crow[j] = crow[j] + av * brow[j];
                }
            }
        }
    }
    c
}

/// `C = A · Bᵀ` with `A: m×k`, `B: n×k`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n)
}

/// `C = Aᵀ · B` with `A: k×m`, `B: k×n`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    matmul_nn(&at, b, m, k, n)
}

/// Cache-blocked transpose of a `rows×cols` row-major matrix.
pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![T::zero(); rows * cols];
    const B: usize = 32;
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + B).min(rows);
        let mut c0 = 0;
        while c0 < cols {
            let c1 = (c0 + B).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
    dst
}

/// `y = x · w + b` with `x: n×d_in`, `w: d_in×d_out`, `b: d_out`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut y = matmul_nn(x, w, n, d_in, d_out);
    for row in y.chunks_exact_mut(d_out) {
        for (v, &bv) in row.iter_mut().zip(b.iter()) {
            *v = *v + bv;
        }
    }
    y
}

/// Unfolds `x: ci×h×w` into `(ci·9)×(h·w)` patches for a 3×3, stride-1,
/// pad-1 convolution.
pub(crate) fn im2col_3x3<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), ci * h * w);
    let hw = h * w;
    let mut cols = vec![T::zero(); ci * 9 * hw];
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[(sy as usize) * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match dx {
                        0 => dst.copy_from_slice(src),
                        1 => dst[..w - 1].copy_from_slice(&src[1..]),
                        _ => dst[1..].copy_from_slice(&src[..w - 1]),
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch gradients back onto the input grid (adjoint of [`im2col_3x3`]).
pub(crate) fn col2im_3x3<T: Scalar>(cols: &[T], ci: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    debug_assert_eq!(cols.len(), ci * 9 * hw);
    let mut x = vec![T::zero(); ci * hw];
    for c in 0..ci {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[(sy as usize) * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match dx {
                        0 => {
                            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst[1..].iter_mut().zip(src[..w - 1].iter()) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(src[1..].iter()) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3×3 convolution, stride 1, pad 1: `x: ci×h×w`, `w: co×ci×3×3`, `b: co`.
pub(crate) fn conv3x3_forward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    b: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
) -> Vec<T> {
    let hw = h * w;
    let cols = im2col_3x3(x, ci, h, w);
    let mut y = matmul_nn(wgt, &cols, co, ci * 9, hw);
    for (o, row) in y.chunks_exact_mut(hw).enumerate() {
        let bv = b[o];
        for v in row.iter_mut() {
            *v = *v + bv;
        }
    }
    y
}

/// SiLU activation `x · sigmoid(x)`.
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// Row-wise softmax of a `rows×cols` matrix with row-max subtraction.
///
/// Returns `None` when any input entry is non-finite.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Option<Vec<T>> {
    debug_assert_eq!(x.len(), rows * cols);
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut y = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut y[r * cols..(r + 1) * cols];
        let mut mx = src[0];
        for &v in &src[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            let e = (v - mx).exp();
            *d = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    Some(y)
}

/// Half-open averaging window of output cell `i` for adaptive pooling.
///
/// `[floor(i·len/out), ceil((i+1)·len/out))` — nonempty for any `out ≥ 1`,
/// the identity when `out == len`, and nearest-style replication when
/// `out > len`.
pub(crate) fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = i * len / out;
    let hi = ((i + 1) * len + out - 1) / out;
    (lo, hi.max(lo + 1).min(len))
}

/// Adaptive average pooling of `x: c×h×w` onto an `out_h×out_w` grid.
pub(crate) fn pool_general<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), c * h * w);
    let mut y = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1) = pool_window(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = pool_window(ox, w, out_w);
                let mut sum = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        sum = sum + plane[yy * w + xx];
                    }
                }
                let count = T::from_count((y1 - y0) * (x1 - x0));
                dst[oy * out_w + ox] = sum / count;
            }
        }
    }
    y
}

/// Rotates consecutive feature pairs of `x: n×d` by per-(token, pair) angles.
///
/// `cos`/`sin` hold `n·(d/2)` entries in token-major order. With
/// `invert = true` the rotation runs backwards (the adjoint), which is how
/// gradients propagate through the position encoding.
pub(crate) fn rotate_pairs<T: Scalar>(
    x: &[T],
    n: usize,
    d: usize,
    cos: &[T],
    sin: &[T],
    invert: bool,
) -> Vec<T> {
    debug_assert_eq!(x.len(), n * d);
    debug_assert_eq!(cos.len(), n * (d / 2));
    debug_assert_eq!(sin.len(), n * (d / 2));
    let half = d / 2;
    let mut y = vec![T::zero(); n * d];
    for tok in 0..n {
        for t in 0..half {
            let a = x[tok * d + 2 * t];
            let b = x[tok * d + 2 * t + 1];
            let c = cos[tok * half + t];
            let s = if invert { -sin[tok * half + t] } else { sin[tok * half + t] };
            y[tok * d + 2 * t] = a * c - b * s;
            y[tok * d + 2 * t + 1] = a * s + b * c;
        }
    }
    y
}

/// `dst += src`, element-wise.
pub(crate) fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_on_awkward_shapes() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 16, 16), (5, 2, 17), (9, 64, 33), (64, 576, 40)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let got = matmul_nn(&a, &b, m, k, n);
            let want = naive_matmul(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-9, "m={m} k={k} n={n}");
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transposes() {
        let mut rng = Rng::new(5);
        let (m, k, n) = (6, 9, 11);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let direct = matmul_nt(&a, &b, m, k, n);
        let via = naive_matmul(&a, &transpose(&b, n, k), m, k, n);
        assert_eq!(direct, via);

        let a2: Vec<f64> = (0..k * m).map(|_| rng.normal()).collect();
        let b2: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let direct = matmul_tn(&a2, &b2, m, k, n);
        let via = naive_matmul(&transpose(&a2, k, m), &b2, m, k, n);
        assert_eq!(direct, via);
    }

    #[test]
    fn transpose_involutes() {
        let mut rng = Rng::new(2);
        let src: Vec<f64> = (0..7 * 13).map(|_| rng.normal()).collect();
        let back = transpose(&transpose(&src, 7, 13), 13, 7);
        assert_eq!(src, back);
    }

    #[test]
    fn conv_with_center_delta_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let (ci, h, w) = (2, 5, 4);
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.normal()).collect();
        // One output channel per input channel, kernel = delta at the center.
        let mut wgt = vec![0.0; ci * ci * 9];
        for c in 0..ci {
            wgt[(c * ci + c) * 9 + 4] = 1.0;
        }
        let y = conv3x3_forward(&x, &wgt, &vec![0.0; ci], ci, h, w, ci);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_kernel_sums_the_neighborhood() {
        // Constant input of 1 with a 3×3 all-ones kernel: interior cells see
        // the full 9-cell neighborhood, corners only 4.
        let (ci, h, w) = (1, 4, 4);
        let x = vec![1.0f64; h * w];
        let wgt = vec![1.0; 9];
        let y = conv3x3_forward(&x, &wgt, &[0.0], ci, h, w, 1);
        assert_eq!(y[1 * w + 1], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[w - 1], 4.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)> for random x, g.
        let mut rng = Rng::new(8);
        let (ci, h, w) = (3, 5, 6);
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..ci * 9 * h * w).map(|_| rng.normal()).collect();
        let lhs: f64 = im2col_3x3(&x, ci, h, w).iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im_3x3(&g, ci, h, w).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant() {
        let mut rng = Rng::new(4);
        let (rows, cols) = (5, 9);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 3.0).collect();
        let y = softmax_rows(&x, rows, cols).unwrap();
        for r in 0..rows {
            let s: f64 = y[r * cols..(r + 1) * cols].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.0).collect();
        let y2 = softmax_rows(&shifted, rows, cols).unwrap();
        for (a, b) in y.iter().zip(y2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        assert!(softmax_rows(&[0.0, f64::NAN], 1, 2).is_none());
        assert!(softmax_rows(&[f64::INFINITY, 0.0], 1, 2).is_none());
    }

    #[test]
    fn pool_windows_cover_every_input_cell() {
        for (len, out) in [(7, 3), (8, 8), (4, 9), (5, 1)] {
            let mut covered = vec![false; len];
            for i in 0..out {
                let (lo, hi) = pool_window(i, len, out);
                assert!(lo < hi && hi <= len, "window {lo}..{hi} of {len} (out {out})");
                for c in &mut covered[lo..hi] {
                    *c = true;
                }
            }
            if out <= len {
                assert!(covered.iter().all(|&c| c), "len {len} out {out}");
            }
        }
    }

    #[test]
    fn pool_identity_and_hand_example() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let same = pool_general(&x, 1, 1, 4, 1, 4);
        assert_eq!(&same, &x);
        let halved = pool_general(&x, 1, 1, 4, 1, 2);
        assert_eq!(halved, vec![1.5, 3.5]);
    }

    #[test]
    fn rotation_preserves_norms_and_inverts() {
        let mut rng = Rng::new(6);
        let (n, d) = (4, 8);
        let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let angles: Vec<f64> = (0..n * d / 2).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
        let y = rotate_pairs(&x, n, d, &cos, &sin, false);
        for tok in 0..n {
            let nx: f64 = x[tok * d..(tok + 1) * d].iter().map(|v| v * v).sum();
            let ny: f64 = y[tok * d..(tok + 1) * d].iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-9);
        }
        let back = rotate_pairs(&y, n, d, &cos, &sin, true);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
