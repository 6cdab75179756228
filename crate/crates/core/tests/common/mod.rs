#![allow(dead_code)]

use dualvq::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const LINEAR_TOL: f64 = 1e-6;
pub const SMOOTH_TOL: f64 = 1e-5;
pub const GENERAL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values in ±[min_abs, max_abs], keeping clear of kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(min_abs..max_abs);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// every output element carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error `|analytic - numeric| / max(|analytic|, |numeric|)` of the
/// central finite-difference gradient, maximized over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap().data().to_vec())
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| g.constant(t.clone()).unwrap())
            .collect();
        let loss = build(&mut g, &vars).expect("forward");
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff: Vec<f64> = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| a - n)
            .collect();
        let scale = l2(&analytic[i]).max(l2(&numeric)).max(1e-12);
        worst = worst.max(l2(&diff) / scale);
    }
    worst
}

/// Direct six-loop cross-correlation used as the conv2d oracle.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out).unwrap()
}

/// Gradients of `sum(conv2d(x, w) * g_out)` by direct accumulation over
/// every (output, tap) pair.
pub fn naive_conv2d_grads(
    x: &Tensor,
    w: &Tensor,
    g_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (g_out.shape()[2], g_out.shape()[3]);
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g_out.data()[((bi * o + oc) * ho + oy) * wo + ox];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ci) * kh + ki) * kw + kj;
                                gx[xi] += gv * w.data()[wi];
                                gw[wi] += gv * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), gx).unwrap(),
        Tensor::new(ws.to_vec(), gw).unwrap(),
    )
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One finite-difference result: op name, worst relative error over all
/// trials, tolerance it must stay under, number of random shapes tried.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub op: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub trials: usize,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tol && self.trials >= 5
    }
}

const TRIALS: usize = 5;

fn run(op: &'static str, tol: f64, seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> GradResult {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..TRIALS {
        worst = worst.max(trial(&mut r, seed * 100 + t as u64));
    }
    GradResult {
        op,
        worst,
        tol,
        trials: TRIALS,
    }
}

fn dims(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(lo..=hi)).collect()
}

/// Central finite-difference checks for every differentiable op on five
/// random shapes each.
pub fn gradient_suite() -> Vec<GradResult> {
    let mut out = Vec::new();

    out.push(run("add (broadcast)", LINEAR_TOL, 1, |r, s| {
        let d = dims(r, 2, 1, 4);
        let a = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &d[1..], -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("sub (broadcast)", LINEAR_TOL, 2, |r, s| {
        let d = dims(r, 3, 1, 3);
        let a = uniform(r, &d[2..], -1.0, 1.0);
        let b = uniform(r, &d, -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("mul (broadcast)", LINEAR_TOL, 3, |r, s| {
        let d = dims(r, 2, 1, 4);
        let a = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &d[1..], -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("scale / add_scalar / neg", LINEAR_TOL, 4, |r, s| {
        let d = dims(r, 2, 1, 4);
        let a = uniform(r, &d, -1.0, 1.0);
        let f = r.gen_range(-2.0..2.0);
        gradcheck(&[a], |g, v| {
            let y = g.scale(v[0], f)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.neg(y)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("matmul", LINEAR_TOL, 5, |r, s| {
        let d = dims(r, 3, 1, 7);
        let a = uniform(r, &[d[0], d[1]], -1.0, 1.0);
        let b = uniform(r, &[d[1], d[2]], -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("transpose / reshape", LINEAR_TOL, 6, |r, s| {
        let d = dims(r, 2, 1, 5);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(&[a], |g, v| {
            let y = g.transpose(v[0])?;
            let y = g.reshape(y, &[d[0] * d[1]])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("permute", LINEAR_TOL, 7, |r, s| {
        let d = dims(r, 4, 1, 3);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(&[a], |g, v| {
            let y = g.permute(v[0], &[0, 2, 3, 1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("narrow / concat", LINEAR_TOL, 8, |r, s| {
        let mut d = dims(r, 3, 1, 3);
        d[1] += 1;
        let split = r.gen_range(1..d[1]);
        let a = uniform(r, &d, -1.0, 1.0);
        gradcheck(&[a], |g, v| {
            let lo = g.narrow(v[0], 1, 0, split)?;
            let hi = g.narrow(v[0], 1, split, d[1] - split)?;
            let y = g.concat(&[hi, lo], 1)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("conv2d", LINEAR_TOL, 9, |r, s| {
        let (b, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(4..=7), r.gen_range(4..=7));
        let k = r.gen_range(1..=3);
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=1));
        let x = uniform(r, &[b, c, h, w], -1.0, 1.0);
        let wt = uniform(r, &[o, c, k, k], -1.0, 1.0);
        gradcheck(&[x, wt], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("conv_transpose2d", LINEAR_TOL, 10, |r, s| {
        let (b, i, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(2..=5), r.gen_range(2..=5));
        let k = r.gen_range(2..=4);
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=1));
        let x = uniform(r, &[b, i, h, w], -1.0, 1.0);
        let wt = uniform(r, &[i, o, k, k], -1.0, 1.0);
        gradcheck(&[x, wt], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], stride, pad)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("channel_bias", LINEAR_TOL, 11, |r, s| {
        let d = dims(r, 4, 1, 3);
        let x = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &[d[1]], -1.0, 1.0);
        gradcheck(&[x, b], |g, v| {
            let y = g.channel_bias(v[0], v[1])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("sum / mean", LINEAR_TOL, 12, |r, s| {
        let d = dims(r, 2, 1, 5);
        let x = uniform(r, &d, -1.0, 1.0);
        let _ = s;
        gradcheck(&[x], |g, v| {
            let a = g.sum(v[0])?;
            let b = g.mean(v[0])?;
            let b = g.scale(b, 3.0)?;
            g.add(a, b)
        })
    }));
    out.push(run("gather_rows", LINEAR_TOL, 13, |r, s| {
        let (k, d, n) = (r.gen_range(1..=5), r.gen_range(1..=4), r.gen_range(1..=8));
        let table = uniform(r, &[k, d], -1.0, 1.0);
        let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        gradcheck(&[table], |g, v| {
            let y = g.gather_rows(v[0], &idx)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("layernorm", SMOOTH_TOL, 14, |r, s| {
        let rows = r.gen_range(1..=4);
        let d = r.gen_range(2..=6);
        let x = uniform(r, &[rows, d], -2.0, 2.0);
        let gain = uniform(r, &[d], 0.5, 1.5);
        let bias = uniform(r, &[d], -0.5, 0.5);
        gradcheck(&[x, gain, bias], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("softmax", SMOOTH_TOL, 15, |r, s| {
        let d = dims(r, 2, 1, 6);
        let x = uniform(r, &d, -3.0, 3.0);
        gradcheck(&[x], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("gelu", SMOOTH_TOL, 16, |r, s| {
        let d = dims(r, 2, 1, 5);
        let x = uniform(r, &d, -3.0, 3.0);
        gradcheck(&[x], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("softplus", SMOOTH_TOL, 17, |r, s| {
        let d = dims(r, 2, 1, 5);
        let x = uniform(r, &d, -4.0, 4.0);
        gradcheck(&[x], |g, v| {
            let y = g.softplus(v[0])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("relu", GENERAL_TOL, 18, |r, s| {
        let d = dims(r, 2, 1, 5);
        let x = away_from_zero(r, &d, 0.01, 2.0);
        gradcheck(&[x], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("leaky_relu", GENERAL_TOL, 19, |r, s| {
        let d = dims(r, 2, 1, 5);
        let x = away_from_zero(r, &d, 0.01, 2.0);
        gradcheck(&[x], |g, v| {
            let y = g.leaky_relu(v[0], 0.2)?;
            weighted_sum(g, y, s)
        })
    }));
    out.push(run("l1_loss", SMOOTH_TOL, 20, |r, _| {
        let d = dims(r, 2, 1, 5);
        let a = uniform(r, &d, -1.0, 1.0);
        let offset = away_from_zero(r, &d, 0.01, 1.0);
        let b = Tensor::from_fn(&d, |i| a.data()[i] + offset.data()[i]);
        gradcheck(&[a, b], |g, v| g.l1_loss(v[0], v[1]))
    }));
    out.push(run("mse_loss", SMOOTH_TOL, 21, |r, _| {
        let d = dims(r, 2, 1, 5);
        let a = uniform(r, &d, -1.0, 1.0);
        let b = uniform(r, &d, -1.0, 1.0);
        gradcheck(&[a, b], |g, v| g.mse_loss(v[0], v[1]))
    }));
    out.push(run("composite conv->relu->matmul->mse", GENERAL_TOL, 22, |r, _| {
        let c = r.gen_range(1..=2);
        let o = r.gen_range(1..=3);
        let n = r.gen_range(1..=3);
        let x = uniform(r, &[1, c, 5, 5], -1.0, 1.0);
        let w = uniform(r, &[o, c, 3, 3], -1.0, 1.0);
        let m = uniform(r, &[9, n], -1.0, 1.0);
        let target = uniform(r, &[o, n], -1.0, 1.0);
        gradcheck(&[x, w, m], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            let y = g.relu(y)?;
            let y = g.reshape(y, &[o, 9])?;
            let y = g.matmul(y, v[2])?;
            let t = g.constant(target.clone())?;
            g.mse_loss(y, t)
        })
    }));
    out
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive nearest-entry scan, lowest index on ties.
pub fn scan(features: &Tensor, entries: &Tensor) -> Vec<usize> {
    let n = features.shape()[0];
    let k = entries.shape()[0];
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..k {
                if sq_dist(features.row(i), entries.row(j)) < sq_dist(features.row(i), entries.row(best)) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Enumerates every (global, local) entry pair for one 2+2 channel
/// position; returns the best pair and its four loss terms.
pub fn enumerate_dual(z: &[f64], eg: &Tensor, el: &Tensor, beta: f64) -> ((usize, usize), [f64; 4]) {
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..eg.shape()[0] {
        for j in 0..el.shape()[0] {
            let d = sq_dist(&z[..2], eg.row(i)) + sq_dist(&z[2..], el.row(j));
            if best.map_or(true, |(_, b)| d < b) {
                best = Some(((i, j), d));
            }
        }
    }
    let ((i, j), _) = best.unwrap();
    let dg = sq_dist(&z[..2], eg.row(i)) / 2.0;
    let dl = sq_dist(&z[2..], el.row(j)) / 2.0;
    ((i, j), [dg, beta * dg, dl, beta * dl])
}
