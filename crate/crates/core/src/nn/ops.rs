//! Layer kernels and their exact gradients. Convolution is cross-correlation
//! (no kernel flip) with "same" zero padding, lowered to GEMM via im2col.

use rayon::prelude::*;

use super::direct;
use super::scalar::{gemm, Mat};
use super::{Scalar, Tensor4};
use crate::{Error, Result};

fn check_conv_shapes<T: Scalar>(input: &Tensor4<T>, wshape: [usize; 4], bias_len: usize) -> Result<usize> {
    let [cout, cin, kh, kw] = wshape;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if input.channels() != cin {
        return Err(Error::invalid(format!(
            "conv expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if bias_len != cout {
        return Err(Error::invalid(format!("bias has {bias_len} entries for {cout} filters")));
    }
    Ok(kh)
}

/// Copies shifted input planes into `cols`, `[cin * k * k, h * w]`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    dst[x0..x1].copy_from_slice(
                        &src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize],
                    );
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x` (accumulating).
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x0..y * w + x1];
                    let dst = &mut plane[sy as usize * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2-D convolution with "same" padding. `weight` is `[cout, cin, k, k]`.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    conv2d_raw(input, weight.data(), weight.shape(), bias)
}

/// Few channels over a large plane: im2col traffic dwarfs the arithmetic.
fn use_direct(k: usize, cin: usize, cout: usize, hw: usize) -> bool {
    k == 3 && (cin * cout <= 256 || hw >= 256 * 256)
}

pub(crate) fn conv2d_raw<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    wshape: [usize; 4],
    bias: &[T],
) -> Result<Tensor4<T>> {
    let [_, cin, h, w] = input.shape();
    conv2d_path(input, weight, wshape, bias, use_direct(wshape[2], cin, wshape[0], h * w))
}

fn conv2d_path<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    wshape: [usize; 4],
    bias: &[T],
    direct: bool,
) -> Result<Tensor4<T>> {
    let k = check_conv_shapes(input, wshape, bias.len())?;
    let [n, cin, h, w] = input.shape();
    let cout = wshape[0];
    let hw = h * w;
    let patch = cin * k * k;
    let wmat = Mat::new(weight, cout, patch);
    let mut out = Tensor4::zeros([n, cout, h, w]);
    if direct && k == 3 {
        out.data_mut()
            .par_chunks_mut(cout * hw)
            .enumerate()
            .for_each(|(b, o)| direct::forward(input.sample(b), cin, h, w, weight, bias, o));
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each_init(
            || if k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] },
            |cols, (b, o)| {
                let x = input.sample(b);
                let cols: &[T] = if k == 1 {
                    x
                } else {
                    im2col(x, cin, h, w, k, cols);
                    cols
                };
                for (row, &bv) in o.chunks_mut(hw).zip(bias) {
                    row.fill(bv);
                }
                gemm(wmat, Mat::new(cols, patch, hw), o, true);
            },
        );
    Ok(out)
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_raw(input, weight.data(), weight.shape(), grad_out)
}

pub(crate) fn conv2d_backward_raw<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    wshape: [usize; 4],
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let [_, cin, h, w] = input.shape();
    let direct = use_direct(wshape[2], cin, wshape[0], h * w);
    conv2d_backward_path(input, weight, wshape, grad_out, direct)
}

fn conv2d_backward_path<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    wshape: [usize; 4],
    grad_out: &Tensor4<T>,
    direct: bool,
) -> Result<ConvGrads<T>> {
    let cout = wshape[0];
    let k = check_conv_shapes(input, wshape, cout)?;
    let [n, cin, h, w] = input.shape();
    if grad_out.shape() != [n, cout, h, w] {
        return Err(Error::invalid(format!(
            "conv gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, h, w]
        )));
    }
    let hw = h * w;
    let patch = cin * k * k;
    let wmat = Mat::new(weight, cout, patch);
    let mut grad_in = Tensor4::zeros(input.shape());
    let direct = direct && k == 3;
    let flipped = if direct { direct::flip_transpose(weight, cout, cin) } else { Vec::new() };
    let no_bias = vec![T::zero(); cin];

    // Per-sample parameter gradients, reduced below in sample order so the
    // result does not depend on the worker count.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(cin * hw)
        .enumerate()
        .map_init(
            || {
                if k == 1 || direct {
                    (Vec::new(), Vec::new())
                } else {
                    (vec![T::zero(); patch * hw], vec![T::zero(); patch * hw])
                }
            },
            |(cols, dcols), (b, dx)| {
                let x = input.sample(b);
                let g = grad_out.sample(b);
                let gmat = Mat::new(g, cout, hw);
                if direct {
                    let mut dw = vec![T::zero(); cout * patch];
                    direct::weight_grad(x, cin, h, w, g, cout, &mut dw);
                    direct::forward(g, cout, h, w, &flipped, &no_bias, dx);
                    let db: Vec<T> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                    return (dw, db);
                }
                let cols: &[T] = if k == 1 {
                    x
                } else {
                    im2col(x, cin, h, w, k, cols);
                    cols
                };
                let mut dw = vec![T::zero(); cout * patch];
                gemm(gmat, Mat::new(cols, patch, hw).t(), &mut dw, false);
                let db: Vec<T> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                if k == 1 {
                    gemm(wmat.t(), gmat, dx, false);
                } else {
                    gemm(wmat.t(), gmat, dcols, false);
                    col2im(dcols, cin, h, w, k, dx);
                }
                (dw, db)
            },
        )
        .collect();

    let mut weight_grad = vec![T::zero(); cout * patch];
    let mut bias_grad = vec![T::zero(); cout];
    for (dw, db) in &per_sample {
        for (a, &v) in weight_grad.iter_mut().zip(dw) {
            *a += v;
        }
        for (a, &v) in bias_grad.iter_mut().zip(db) {
            *a += v;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: weight_grad,
        bias: bias_grad,
    })
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad` where `input > 0`. The ReLU output may be given instead of
/// its input since both are positive at the same positions.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.shape() != grad.shape() {
        return Err(Error::invalid("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

fn check_even<T: Scalar>(t: &Tensor4<T>, what: &str) -> Result<()> {
    if t.height() % 2 != 0 || t.width() % 2 != 0 {
        return Err(Error::invalid(format!(
            "{what} needs even spatial dims, got {}x{}",
            t.height(),
            t.width()
        )));
    }
    Ok(())
}

/// Offset of the maximum in each 2x2 window, first in row-major order on ties.
fn argmax2<T: Scalar>(plane: &[T], w: usize, y: usize, x: usize) -> usize {
    let cands = [
        2 * y * w + 2 * x,
        2 * y * w + 2 * x + 1,
        (2 * y + 1) * w + 2 * x,
        (2 * y + 1) * w + 2 * x + 1,
    ];
    let mut best = cands[0];
    for &c in &cands[1..] {
        if plane[c] > plane[best] {
            best = c;
        }
    }
    best
}

pub fn maxpool2<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(input, "maxpool2")?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for (plane, o) in input.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                o[y * ow + x] = plane[argmax2(plane, w, y, x)];
            }
        }
    }
    Ok(out)
}

/// Routes each upstream value to the argmax of its window.
pub fn maxpool2_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(input, "maxpool2")?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::invalid("maxpool2 gradient shape mismatch"));
    }
    let mut grad_in = Tensor4::zeros(input.shape());
    for ((plane, g), d) in input
        .data()
        .chunks(h * w)
        .zip(grad_out.data().chunks(oh * ow))
        .zip(grad_in.data_mut().chunks_mut(h * w))
    {
        for y in 0..oh {
            for x in 0..ow {
                d[argmax2(plane, w, y, x)] += g[y * ow + x];
            }
        }
    }
    Ok(grad_in)
}

/// Nearest-neighbour 2x up-sampling.
pub fn upsample2<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = input.shape();
    let ow = 2 * w;
    let mut out = Tensor4::zeros([n, c, 2 * h, ow]);
    for (plane, o) in input.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let row = &mut o[2 * y * ow..(2 * y + 1) * ow];
            for (x, &v) in src.iter().enumerate() {
                row[2 * x] = v;
                row[2 * x + 1] = v;
            }
            o.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    out
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(grad_out, "upsample2 gradient")?;
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_in = Tensor4::zeros([n, c, h, w]);
    for (g, d) in grad_out.data().chunks(oh * ow).zip(grad_in.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * ow + 2 * x;
                d[y * w + x] = g[i] + g[i + 1] + g[i + ow] + g[i + ow + 1];
            }
        }
    }
    Ok(grad_in)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(Error::invalid(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data)
}

/// Splits a concatenated gradient back into the parts for `a` (first
/// `channels_a` channels) and `b`.
pub fn concat_backward<T: Scalar>(grad: &Tensor4<T>, channels_a: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, c, h, w] = grad.shape();
    if channels_a == 0 || channels_a >= c {
        return Err(Error::invalid(format!("cannot split {c} channels at {channels_a}")));
    }
    let split = channels_a * h * w;
    let mut ga = Vec::with_capacity(n * split);
    let mut gb = Vec::with_capacity(grad.len() - n * split);
    for i in 0..n {
        let s = grad.sample(i);
        ga.extend_from_slice(&s[..split]);
        gb.extend_from_slice(&s[split..]);
    }
    Ok((
        Tensor4::from_vec([n, channels_a, h, w], ga)?,
        Tensor4::from_vec([n, c - channels_a, h, w], gb)?,
    ))
}

/// Mean squared error and its gradient `2 (p - t) / N`.
pub fn mse_loss<T: Scalar>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    let rows = vec![prediction.height(); prediction.batch()];
    mse_loss_masked(prediction, target, &rows)
}

/// MSE restricted to the first `valid_rows[b]` rows of every sample `b`.
pub fn mse_loss_masked<T: Scalar>(
    prediction: &Tensor4<T>,
    target: &Tensor4<T>,
    valid_rows: &[usize],
) -> Result<(f64, Tensor4<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "prediction {:?} and target {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    let [n, c, h, w] = prediction.shape();
    if valid_rows.len() != n || valid_rows.iter().any(|&r| r > h) {
        return Err(Error::invalid("valid row counts do not match the batch"));
    }
    let count: usize = valid_rows.iter().map(|&r| r * c * w).sum();
    if count == 0 {
        return Err(Error::invalid("loss mask selects no elements"));
    }
    let scale = 2.0 / count as f64;
    let mut grad = Tensor4::zeros(prediction.shape());
    let mut total = 0.0;
    let plane = h * w;
    for (i, &rows) in valid_rows.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for j in base..base + rows * w {
                let d = prediction.data()[j].as_f64() - target.data()[j].as_f64();
                total += d * d;
                grad.data_mut()[j] = T::from_f64(scale * d);
            }
        }
    }
    Ok((total / count as f64, grad))
}
