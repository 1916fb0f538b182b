//! Forward and backward kernels for the layer operations. All loops run in a
//! fixed order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(shape_err());
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if weight[2] > h || weight[3] > w {
            return Err(shape_err());
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel_h: weight[2],
            kernel_w: weight[3],
            stride,
            padding,
            out_h: (h - weight[2]) / stride + 1,
            out_w: (w - weight[3]) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output columns `ox` for which `ox*stride + kx - padding` lands inside the input row.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.padding {
            0
        } else {
            (self.padding - kx).div_ceil(self.stride)
        };
        // ox*stride + kx - padding <= width - 1
        let limit = self.width + self.padding;
        let hi = if kx >= limit {
            0
        } else {
            ((limit - kx - 1) / self.stride + 1).min(self.out_w)
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.padding && iy - self.padding < self.height).then(|| iy - self.padding)
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![g.out_channels],
            });
        }
    }
    let (x, wt) = (input.data(), weight.data());
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_channels * plane_out];

    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            for ci in 0..g.in_channels {
                let inp = &x[(n * g.in_channels + ci) * plane_in..][..plane_in];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let wv =
                            wt[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.out_h {
                            let Some(iy) = g.input_row(oy, ky) else {
                                continue;
                            };
                            let row = &inp[iy * g.width..][..g.width];
                            let orow = &mut o[oy * g.out_w..][..g.out_w];
                            for ox in lo..hi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(g.output_shape(), out)?, g))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> ConvGrads {
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.out_channels];
    let mut gx = want_input.then(|| vec![0.0; x.len()]);

    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let gop = &go[(n * g.out_channels + co) * plane_out..][..plane_out];
            gb[co] += gop.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let in_off = (n * g.in_channels + ci) * plane_in;
                let inp = &x[in_off..][..plane_in];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let widx = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                        let (lo, hi) = g.col_range(kx);
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let Some(iy) = g.input_row(oy, ky) else {
                                continue;
                            };
                            let row = &inp[iy * g.width..][..g.width];
                            let grow = &gop[oy * g.out_w..][..g.out_w];
                            for ox in lo..hi {
                                acc += grow[ox] * row[ox * g.stride + kx - g.padding];
                            }
                        }
                        gw[widx] += acc;

                        let wv = wt[widx];
                        if wv == 0.0 {
                            continue;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gin = &mut gx[in_off..][..plane_in];
                            for oy in 0..g.out_h {
                                let Some(iy) = g.input_row(oy, ky) else {
                                    continue;
                                };
                                let grow = &gop[oy * g.out_w..][..g.out_w];
                                let irow = &mut gin[iy * g.width..][..g.width];
                                for ox in lo..hi {
                                    irow[ox * g.stride + kx - g.padding] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("input shape")),
        weight: Tensor::new(weight.shape().to_vec(), gw).expect("weight shape"),
        bias: Tensor::new(vec![g.out_channels], gb).expect("bias shape"),
    }
}

/// `input[N,D] * weight[O,D]^T + bias[O]`.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return Err(Error::Shape {
            op: "dense",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, d, o) = (is[0], is[1], ws[0]);
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape {
                op: "dense bias",
                lhs: b.shape().to_vec(),
                rhs: vec![o],
            });
        }
    }
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        let xrow = &input.data()[i * d..][..d];
        for j in 0..o {
            let wrow = &weight.data()[j * d..][..d];
            let mut acc = bias.map_or(0.0, |b| b.data()[j]);
            for k in 0..d {
                acc += xrow[k] * wrow[k];
            }
            out[i * o + j] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    let go = grad_out.data();
    let mut gw = vec![0.0; o * d];
    let mut gb = vec![0.0; o];
    let mut gx = want_input.then(|| vec![0.0; n * d]);
    for i in 0..n {
        let xrow = &input.data()[i * d..][..d];
        for j in 0..o {
            let gij = go[i * o + j];
            gb[j] += gij;
            let gwrow = &mut gw[j * d..][..d];
            for k in 0..d {
                gwrow[k] += gij * xrow[k];
            }
            if let Some(gx) = gx.as_mut() {
                let wrow = &weight.data()[j * d..][..d];
                let gxrow = &mut gx[i * d..][..d];
                for k in 0..d {
                    gxrow[k] += gij * wrow[k];
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::new(vec![n, d], v).expect("dense input")),
        Tensor::new(vec![o, d], gw).expect("dense weight"),
        Tensor::new(vec![o], gb).expect("dense bias"),
    )
}

/// Non-overlapping max pooling with window `size`. Returns the pooled tensor
/// and, per output element, the flat input index of the winner (first max in
/// scan order).
pub fn max_pool_forward(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::Shape {
            op: "max_pool2d",
            lhs: s.to_vec(),
            rhs: vec![size, size],
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Mean softmax cross-entropy and the per-row softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..][..k];
        let top = crate::model::argmax(row);
        let max = row[top];
        // The max term contributes exactly 1; summing the rest separately keeps
        // ln(z) accurate when the margin is large.
        let mut rest = 0.0;
        for (j, (p, &v)) in probs[i * k..][..k].iter_mut().zip(row).enumerate() {
            *p = (v - max).exp();
            if j != top {
                rest += *p;
            }
        }
        let z = 1.0 + rest;
        for p in &mut probs[i * k..][..k] {
            *p /= z;
        }
        total += rest.ln_1p() + (max - row[y]);
    }
    Ok((total / n as f64, probs))
}
