// Convolution kernels.
//
// Both conv2d and its transpose relate a "high" tensor [B,C,H,W] and a
// "low" tensor [B,O,Ho,Wo] through a weight [O,C,kh,kw]:
//
//   low[b,o,y,x] = sum_{c,i,j} w[o,c,i,j] * high[b,c, y*s+i-p, x*s+j-p]
//
// `gather` evaluates that sum, `scatter` is its adjoint, and `weight_grad`
// is d<low_grad, low>/dw. conv2d uses gather forward; conv_transpose2d uses
// scatter forward with the same weight tensor.

use crate::error::{Error, Result};

/// Output extent `floor((input + 2*pad - kernel) / stride) + 1` of a strided
/// convolution, or `None` when the kernel does not fit the padded input.
/// Trailing input rows that do not fill a whole stride are ignored.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Geometry {
    batch: usize,
    high_c: usize,
    high_h: usize,
    high_w: usize,
    low_c: usize,
    low_h: usize,
    low_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    pub(super) fn for_conv(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        let extent = |input: usize, k: usize| {
            conv_output_extent(input, k, stride, pad).ok_or_else(|| {
                Error::invalid(
                    "conv2d",
                    format!("kernel {k} does not fit input {input} with padding {pad} and stride {stride}"),
                )
            })
        };
        let low_h = extent(x[2], w[2])?;
        let low_w = extent(x[3], w[3])?;
        Ok(Self {
            batch: x[0],
            high_c: x[1],
            high_h: x[2],
            high_w: x[3],
            low_c: w[0],
            low_h,
            low_w,
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        })
    }

    pub(super) fn for_transpose(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", x, w));
        }
        let extent = |input: usize, k: usize| {
            ((input - 1) * stride + k)
                .checked_sub(2 * pad)
                .filter(|&e| e > 0)
                .ok_or_else(|| {
                    Error::invalid(
                        "conv_transpose2d",
                        format!("padding {pad} too large for input {input} and kernel {k}"),
                    )
                })
        };
        Ok(Self {
            batch: x[0],
            high_c: w[1],
            high_h: extent(x[2], w[2])?,
            high_w: extent(x[3], w[3])?,
            low_c: x[1],
            low_h: x[2],
            low_w: x[3],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        })
    }

    pub(super) fn low_shape(&self) -> Vec<usize> {
        vec![self.batch, self.low_c, self.low_h, self.low_w]
    }

    pub(super) fn high_shape(&self) -> Vec<usize> {
        vec![self.batch, self.high_c, self.high_h, self.high_w]
    }

    /// Range of low-tensor positions whose tap at kernel offset `k` lands
    /// inside the high tensor.
    fn valid(&self, k: usize, high_len: usize, low_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // high index = y*s + k - p must lie in [0, high_len)
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi_excl = (high_len as isize - 1 + p - k).div_euclid(s) + 1;
        let hi_excl = hi_excl.clamp(0, low_len as isize);
        (lo as usize, hi_excl.max(lo) as usize)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        // f(kernel_i, kernel_j, low_y, low_x_range_start, low_x_range_end, high_row_offset)
        for i in 0..self.kh {
            let (y0, y1) = self.valid(i, self.high_h, self.low_h);
            for j in 0..self.kw {
                let (x0, x1) = self.valid(j, self.high_w, self.low_w);
                for y in y0..y1 {
                    let hy = y * self.stride + i - self.pad;
                    f(i, j, y, x0, x1, hy);
                }
            }
        }
    }

    fn high_x(&self, x: usize, j: usize) -> usize {
        x * self.stride + j - self.pad
    }

    pub(super) fn gather(&self, high: &[f64], w: &[f64]) -> Vec<f64> {
        let (hs, ls) = (self.high_h * self.high_w, self.low_h * self.low_w);
        let mut low = vec![0.0; self.batch * self.low_c * ls];
        for b in 0..self.batch {
            for o in 0..self.low_c {
                let lbase = (b * self.low_c + o) * ls;
                for c in 0..self.high_c {
                    let hbase = (b * self.high_c + c) * hs;
                    let wbase = (o * self.high_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, y, x0, x1, hy| {
                        let wv = w[wbase + i * self.kw + j];
                        let lrow = lbase + y * self.low_w;
                        let hrow = hbase + hy * self.high_w;
                        for x in x0..x1 {
                            low[lrow + x] += wv * high[hrow + self.high_x(x, j)];
                        }
                    });
                }
            }
        }
        low
    }

    pub(super) fn scatter(&self, low: &[f64], w: &[f64]) -> Vec<f64> {
        let (hs, ls) = (self.high_h * self.high_w, self.low_h * self.low_w);
        let mut high = vec![0.0; self.batch * self.high_c * hs];
        for b in 0..self.batch {
            for o in 0..self.low_c {
                let lbase = (b * self.low_c + o) * ls;
                for c in 0..self.high_c {
                    let hbase = (b * self.high_c + c) * hs;
                    let wbase = (o * self.high_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, y, x0, x1, hy| {
                        let wv = w[wbase + i * self.kw + j];
                        let lrow = lbase + y * self.low_w;
                        let hrow = hbase + hy * self.high_w;
                        for x in x0..x1 {
                            high[hrow + self.high_x(x, j)] += wv * low[lrow + x];
                        }
                    });
                }
            }
        }
        high
    }

    pub(super) fn weight_grad(&self, low: &[f64], high: &[f64]) -> Vec<f64> {
        let (hs, ls) = (self.high_h * self.high_w, self.low_h * self.low_w);
        let mut gw = vec![0.0; self.low_c * self.high_c * self.kh * self.kw];
        for b in 0..self.batch {
            for o in 0..self.low_c {
                let lbase = (b * self.low_c + o) * ls;
                for c in 0..self.high_c {
                    let hbase = (b * self.high_c + c) * hs;
                    let wbase = (o * self.high_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, y, x0, x1, hy| {
                        let lrow = lbase + y * self.low_w;
                        let hrow = hbase + hy * self.high_w;
                        let mut acc = 0.0;
                        for x in x0..x1 {
                            acc += low[lrow + x] * high[hrow + self.high_x(x, j)];
                        }
                        gw[wbase + i * self.kw + j] += acc;
                    });
                }
            }
        }
        gw
    }
}
