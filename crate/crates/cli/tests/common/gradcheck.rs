//! Central finite-difference checks of the engine's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specunet::model::{build, ArchitectureSpec, Model};
use specunet::nn::{
    concat_backward, concat_channels, conv2d, conv2d_backward, maxpool2, maxpool2_backward, mse_loss_masked, relu,
    relu_backward, upsample2, upsample2_backward, Layer, Tensor4,
};

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn normal(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `|a - b|` relative to the larger magnitude, floored at `floor` so that
/// near-zero entries are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst error over every coordinate of `x` for the scalar `f(x)`.
fn check_all(x: &Tensor4<f64>, analytic: &[f64], f: impl Fn(&Tensor4<f64>) -> f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let num = (f(&p) - f(&m)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], num, 1e-3 * scale.max(1e-12)));
    }
    worst
}

fn small_shape(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let side = |rng: &mut ChaCha8Rng| if even { 2 * rng.random_range(1..=4) } else { rng.random_range(1..=8) };
    [rng.random_range(1..=2), rng.random_range(1..=4), side(rng), side(rng)]
}

/// Keeps inputs away from the ReLU kink and max-pool ties.
fn spread(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let mut t = normal(rng, shape);
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for (rank, &i) in order.iter().enumerate() {
        let sign = if t.data()[i] < 0.0 { -1.0 } else { 1.0 };
        t.data_mut()[i] = sign * (0.05 + 0.01 * rank as f64);
    }
    t
}

/// Worst relative error of each layer kind for one seed.
pub fn layer_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, k, wide) in [("conv3x3", 3, false), ("conv3x3-wide", 3, true), ("conv1x1", 1, false)] {
        let [n, mut cin, mut h, mut w] = small_shape(&mut rng, false);
        let mut cout = rng.random_range(1..=4);
        if wide {
            // Enough channels to take the im2col/GEMM route.
            (cin, cout, h, w) = (20, 16, 4, 4);
        }
        let x = normal(&mut rng, [n, cin, h, w]);
        let wt = normal(&mut rng, [cout, cin, k, k]);
        let b: Vec<f64> = (0..cout).map(|_| rng.sample(StandardNormal)).collect();
        let r = normal(&mut rng, [n, cout, h, w]);
        let g = conv2d_backward(&x, &wt, &r).unwrap();
        let ex = check_all(&x, g.input.data(), |x| dot(&conv2d(x, &wt, &b).unwrap(), &r));
        let ew = check_all(&wt, &g.weight, |wt| dot(&conv2d(&x, wt, &b).unwrap(), &r));
        let bt = Tensor4::from_vec([1, 1, 1, cout], b.clone()).unwrap();
        let eb = check_all(&bt, &g.bias, |bt| dot(&conv2d(&x, &wt, bt.data()).unwrap(), &r));
        out.push((name, ex.max(ew).max(eb)));
    }

    let shape = small_shape(&mut rng, false);
    let x = spread(&mut rng, shape);
    let r = normal(&mut rng, shape);
    let g = relu_backward(&x, &r).unwrap();
    out.push(("relu", check_all(&x, g.data(), |x| dot(&relu(x), &r))));

    let shape = small_shape(&mut rng, true);
    let x = spread(&mut rng, shape);
    let r = normal(&mut rng, [shape[0], shape[1], shape[2] / 2, shape[3] / 2]);
    let g = maxpool2_backward(&x, &r).unwrap();
    out.push(("maxpool", check_all(&x, g.data(), |x| dot(&maxpool2(x).unwrap(), &r))));

    let shape = small_shape(&mut rng, false);
    let x = normal(&mut rng, shape);
    let r = normal(&mut rng, [shape[0], shape[1], shape[2] * 2, shape[3] * 2]);
    let g = upsample2_backward(&r).unwrap();
    out.push(("upsample", check_all(&x, g.data(), |x| dot(&upsample2(x), &r))));

    let [n, ca, h, w] = small_shape(&mut rng, false);
    let cb = rng.random_range(1..=4);
    let a = normal(&mut rng, [n, ca, h, w]);
    let b = normal(&mut rng, [n, cb, h, w]);
    let r = normal(&mut rng, [n, ca + cb, h, w]);
    let (ga, gb) = concat_backward(&r, ca).unwrap();
    let e1 = check_all(&a, ga.data(), |a| dot(&concat_channels(a, &b).unwrap(), &r));
    let e2 = check_all(&b, gb.data(), |b| dot(&concat_channels(&a, b).unwrap(), &r));
    out.push(("concat", e1.max(e2)));

    let shape = small_shape(&mut rng, false);
    let p = normal(&mut rng, shape);
    let t = normal(&mut rng, shape);
    let rows: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(1..=shape[2])).collect();
    let (_, g) = mse_loss_masked(&p, &t, &rows).unwrap();
    out.push(("mse", check_all(&p, g.data(), |p| mse_loss_masked(p, &t, &rows).unwrap().0)));
    out
}

/// ReLU on/off states and max-pool winners of one forward pass. Within a
/// region where this is constant the network is smooth in its inputs and
/// parameters.
fn activation_pattern(model: &Model<f64>, x: &Tensor4<f64>) -> Vec<u8> {
    let trace = model.forward_trace(x).unwrap();
    let mut out = Vec::new();
    for (i, layer) in model.graph().layers().iter().enumerate() {
        match layer {
            Layer::Conv { relu: true, .. } => out.extend(trace.acts[i + 1].data().iter().map(|&v| u8::from(v > 0.0))),
            Layer::MaxPool => {
                let a = &trace.acts[i];
                let [n, c, h, w] = a.shape();
                for b in 0..n {
                    for ch in 0..c {
                        for y in (0..h).step_by(2) {
                            for xx in (0..w).step_by(2) {
                                let cand = [[b, ch, y, xx], [b, ch, y, xx + 1], [b, ch, y + 1, xx], [b, ch, y + 1, xx + 1]];
                                let mut best = 0u8;
                                for (k, &ix) in cand.iter().enumerate() {
                                    if a.get(ix) > a.get(cand[best as usize]) {
                                        best = k as u8;
                                    }
                                }
                                out.push(best);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Sampled-coordinate check of a whole network in double precision.
/// Returns the worst error over `coords` parameter and input coordinates.
pub fn model_error(spec: &ArchitectureSpec, seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut model = build(spec, seed).unwrap().cast::<f64>();
    // Zero biases put pixels whose inputs are all zero exactly on the ReLU
    // kink, where the one-sided analytic derivative and a central difference
    // legitimately disagree.
    for p in model.params_mut().iter_mut().filter(|p| p.shape.len() == 1) {
        p.value.iter_mut().for_each(|b| *b = 0.01 * rng.sample::<f64, _>(StandardNormal));
    }
    let s = spec.input_size;
    let x = normal(&mut rng, [1, 1, s, s]);
    let r = normal(&mut rng, [1, 1, s, s]);
    let trace = model.forward_trace(&x).unwrap();
    let gx = model.backward(&trace, &r).unwrap();
    // Differencing the outputs before contracting with `r` keeps the rounding
    // of two large, nearly equal sums out of the estimate.
    let diff = |p: &Tensor4<f64>, m: &Tensor4<f64>| -> f64 {
        p.data().iter().zip(m.data()).zip(r.data()).map(|((a, b), w)| (a - b) * w).sum()
    };

    let base = activation_pattern(&model, &x);
    let mut worst = 0.0f64;
    let mut checked = 0;
    // Coordinates whose perturbation flips a ReLU or a pool winner straddle a
    // kink; they are redrawn.
    while checked < coords {
        let pi = rng.random_range(0..model.params().len());
        let ci = rng.random_range(0..model.params()[pi].numel());
        let analytic = model.params()[pi].grad[ci];
        let scale = model.params()[pi].grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let orig = model.params()[pi].value[ci];
        model.params_mut()[pi].value[ci] = orig + STEP;
        let op = model.forward(&x).unwrap();
        let smooth_p = activation_pattern(&model, &x) == base;
        model.params_mut()[pi].value[ci] = orig - STEP;
        let om = model.forward(&x).unwrap();
        let smooth_m = activation_pattern(&model, &x) == base;
        model.params_mut()[pi].value[ci] = orig;
        if smooth_p && smooth_m {
            let num = diff(&op, &om) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic, num, 1e-3 * scale.max(1e-12)));
            checked += 1;
        }
    }
    let scale = gx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut checked = 0;
    while checked < 2 {
        let i = rng.random_range(0..x.len());
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        if activation_pattern(&model, &p) != base || activation_pattern(&model, &m) != base {
            continue;
        }
        let num = diff(&model.forward(&p).unwrap(), &model.forward(&m).unwrap()) / (2.0 * STEP);
        worst = worst.max(rel_err(gx.data()[i], num, 1e-3 * scale.max(1e-12)));
        checked += 1;
    }
    worst
}
