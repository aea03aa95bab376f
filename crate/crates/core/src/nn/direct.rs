//! Direct 3x3 convolution kernels for layers with few channels and large
//! planes, where im2col is dominated by memory traffic.

use super::Scalar;

const LANES: usize = 8;

/// `o[x] += sum_k w[k] * row_k[x + dx_k]` over the three taps of each of
/// three input rows, zero outside the row.
#[inline]
fn accumulate_row<T: Scalar>(o: &mut [T], rows: [&[T]; 3], k: &[T]) {
    let w = o.len();
    if w == 1 {
        for (ky, r) in rows.iter().enumerate() {
            o[0] += k[ky * 3 + 1] * r[0];
        }
        return;
    }
    for (ky, r) in rows.iter().enumerate() {
        let (a, b, c) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
        o[0] += b * r[0] + c * r[1];
        o[w - 1] += a * r[w - 2] + b * r[w - 1];
        for (((ov, &l), &m), &rr) in o[1..w - 1]
            .iter_mut()
            .zip(&r[..w - 2])
            .zip(&r[1..w - 1])
            .zip(&r[2..])
        {
            *ov += a * l + b * m + c * rr;
        }
    }
}

/// Forward 3x3 "same" convolution of one sample.
/// `weight` is `[cout, cin, 3, 3]`, `out` is `[cout, h, w]`.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    let zeros = vec![T::zero(); w];
    for (o, plane) in out.chunks_mut(hw).enumerate() {
        plane.fill(bias[o]);
        for c in 0..cin {
            let k = &weight[(o * cin + c) * 9..][..9];
            let inp = &x[c * hw..(c + 1) * hw];
            for y in 0..h {
                let above = if y > 0 { &inp[(y - 1) * w..y * w] } else { &zeros[..] };
                let below = if y + 1 < h { &inp[(y + 1) * w..(y + 2) * w] } else { &zeros[..] };
                accumulate_row(&mut plane[y * w..(y + 1) * w], [above, &inp[y * w..(y + 1) * w], below], k);
            }
        }
    }
}

/// Kernel for the input gradient: `flipped[c, o, ky, kx] = w[o, c, 2 - ky, 2 - kx]`.
pub(crate) fn flip_transpose<T: Scalar>(weight: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut f = vec![T::zero(); weight.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..9 {
                f[(c * cout + o) * 9 + (8 - t)] = weight[(o * cin + c) * 9 + t];
            }
        }
    }
    f
}

#[inline]
fn dot3<T: Scalar>(g: &[T], l: &[T], m: &[T], r: &[T], acc: &mut [[T; LANES]; 3]) {
    let n = g.len();
    let full = n - n % LANES;
    for (((gc, lc), mc), rc) in g[..full]
        .chunks_exact(LANES)
        .zip(l[..full].chunks_exact(LANES))
        .zip(m[..full].chunks_exact(LANES))
        .zip(r[..full].chunks_exact(LANES))
    {
        for j in 0..LANES {
            acc[0][j] += gc[j] * lc[j];
            acc[1][j] += gc[j] * mc[j];
            acc[2][j] += gc[j] * rc[j];
        }
    }
    for i in full..n {
        acc[0][0] += g[i] * l[i];
        acc[1][0] += g[i] * m[i];
        acc[2][0] += g[i] * r[i];
    }
}

/// Weight gradient of one sample, written to `dw` (`[cout, cin, 3, 3]`).
pub(crate) fn weight_grad<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    grad_out: &[T],
    cout: usize,
    dw: &mut [T],
) {
    let hw = h * w;
    for o in 0..cout {
        let g = &grad_out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let inp = &x[c * hw..(c + 1) * hw];
            let mut acc = [[[T::zero(); LANES]; 3]; 3];
            let mut edge = [T::zero(); 9];
            for y in 0..h {
                let grow = &g[y * w..(y + 1) * w];
                for (ky, acc_ky) in acc.iter_mut().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let r = &inp[sy as usize * w..(sy as usize + 1) * w];
                    if w == 1 {
                        edge[ky * 3 + 1] += grow[0] * r[0];
                        continue;
                    }
                    // Columns 1..w-1 see all three taps; the borders are added separately.
                    dot3(&grow[1..w - 1], &r[..w - 2], &r[1..w - 1], &r[2..], acc_ky);
                    edge[ky * 3 + 1] += grow[0] * r[0] + grow[w - 1] * r[w - 1];
                    edge[ky * 3 + 2] += grow[0] * r[1];
                    edge[ky * 3] += grow[w - 1] * r[w - 2];
                }
            }
            let out = &mut dw[(o * cin + c) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let lanes: T = acc[ky][kx].iter().copied().sum();
                    out[ky * 3 + kx] = lanes + edge[ky * 3 + kx];
                }
            }
        }
    }
}
