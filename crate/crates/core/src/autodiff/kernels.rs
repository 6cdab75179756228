// Forward and backward kernels on flat row-major buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(super) fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// Elementwise binary op where one operand's shape may be a suffix of the
/// other's (trailing-dimension alignment).
pub(super) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let out_shape = if sa.ends_with(sb) {
        sa
    } else if sb.ends_with(sa) {
        sb
    } else {
        return Err(Error::shape(op, sa, sb));
    };
    let n: usize = out_shape.iter().product();
    let (da, db) = (a.data(), b.data());
    let (ma, mb) = (da.len(), db.len());
    let data = (0..n).map(|i| f(da[i % ma], db[i % mb])).collect();
    Ok(Tensor::from_parts(out_shape.to_vec(), data))
}

/// Sums an output gradient down to an operand of `numel` elements that was
/// repeated over leading dimensions.
pub(super) fn reduce_broadcast(g: &[f64], numel: usize) -> Vec<f64> {
    if g.len() == numel {
        return g.to_vec();
    }
    let mut out = vec![0.0; numel];
    for (i, v) in g.iter().enumerate() {
        out[i % numel] += v;
    }
    out
}

pub(super) fn mul_grad(g: &[f64], other: &[f64], numel: usize) -> Vec<f64> {
    let m = other.len();
    let mut out = vec![0.0; numel];
    for (i, v) in g.iter().enumerate() {
        out[i % numel] += v * other[i % m];
    }
    out
}

pub(super) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(super) fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index of the permuted tensor, the flat index of the
/// source element.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(super) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let out_shape = perm.iter().map(|&p| x.shape()[p]).collect();
    let d = x.data();
    let data = permute_sources(x.shape(), perm)
        .into_iter()
        .map(|s| d[s])
        .collect();
    Tensor::from_parts(out_shape, data)
}

pub(super) fn permute_grad(in_shape: &[usize], perm: &[usize], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for (o, s) in permute_sources(in_shape, perm).into_iter().enumerate() {
        out[s] = g[o];
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub(super) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    let (outer, inner) = outer_inner(s, axis);
    let d = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * s[axis] + start) * inner;
        data.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, data)
}

pub(super) fn narrow_grad(
    in_shape: &[usize],
    out: &Tensor,
    axis: usize,
    start: usize,
    g: &[f64],
) -> Vec<f64> {
    let (outer, inner) = outer_inner(in_shape, axis);
    let len = out.shape()[axis];
    let mut res = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * in_shape[axis] + start) * inner;
        let src = o * len * inner;
        res[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    res
}

pub(super) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let (outer, inner) = outer_inner(first, axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, data)
}

pub(super) fn concat_grad(shapes: &[&[usize]], axis: usize, g: &[f64]) -> Vec<Vec<f64>> {
    let (outer, inner) = outer_inner(shapes[0], axis);
    let mut parts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            let block = s[axis] * inner;
            part.extend_from_slice(&g[pos..pos + block]);
            pos += block;
        }
    }
    parts
}

pub(super) fn channel_bias(x: &Tensor, bias: &[f64]) -> Tensor {
    let s = x.shape();
    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
    let mut data = x.data().to_vec();
    for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
        let b = bias[chunk_idx % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::from_parts(s.to_vec(), data)
}

pub(super) fn channel_bias_grad(shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; c];
    for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
        out[chunk_idx % c] += chunk.iter().sum::<f64>();
    }
    out
}

pub(super) fn layernorm(
    x: &Tensor,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.numel() / d;
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat.push(h);
            out.push(h * gain[j] + bias[j]);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), out),
        xhat,
        inv_std,
    )
}

pub(super) fn layernorm_grad(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut gx = Vec::with_capacity(g.len());
    let mut ggain = vec![0.0; d];
    let mut gbias = vec![0.0; d];
    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            let dh = grow[j] * gain[j];
            mean_dh += dh;
            mean_dh_h += dh * hrow[j];
            ggain[j] += grow[j] * hrow[j];
            gbias[j] += grow[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = grow[j] * gain[j];
            gx.push(inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h));
        }
    }
    (gx, ggain, gbias)
}

pub(super) fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("checked non-scalar");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(super) fn softmax_grad(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let n = *y.shape().last().expect("checked non-scalar");
    let mut out = Vec::with_capacity(g.len());
    for (yrow, grow) in y.data().chunks(n).zip(g.chunks(n)) {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        out.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - dot)));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(super) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(super) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
