//! Convolutional building blocks over `[h, w, c]` feature maps.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Square "same"-padded convolution with zero borders.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, k, k, in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    /// Bias-free conv with fan-in uniform weights.
    pub fn seeded(in_ch: usize, out_ch: usize, k: usize, rng: &mut Rng) -> Self {
        assert!(k % 2 == 1, "conv kernel must be odd");
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::random(&[out_ch, k, k, in_ch], -bound, bound, rng),
            bias: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, c] = x.dims3("conv2d")?;
        if c != self.in_channels() {
            return Err(Error::dim("conv2d", x.shape(), self.weight.shape()));
        }
        let k = self.kernel();
        let r = (k / 2) as isize;
        let oc = self.out_channels();
        let wd = self.weight.data();
        let xd = x.data();
        let mut out = vec![0.0; h * w * oc];
        for y in 0..h {
            for xx in 0..w {
                let o_base = (y * w + xx) * oc;
                for o in 0..oc {
                    let mut acc = match &self.bias {
                        Some(b) => b.data()[o],
                        None => 0.0,
                    };
                    for dy in -r..=r {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let sx = xx as isize + dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let xi = (sy as usize * w + sx as usize) * c;
                            let wi = ((o * k + (dy + r) as usize) * k + (dx + r) as usize) * c;
                            let xs = &xd[xi..xi + c];
                            let ws = &wd[wi..wi + c];
                            for (a, b) in xs.iter().zip(ws) {
                                acc += a * b;
                            }
                        }
                    }
                    out[o_base + o] = acc;
                }
            }
        }
        Tensor::new(vec![h, w, oc], out)
    }
}

/// Per-channel standardization with frozen running statistics, i.e. batch
/// norm in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl ChannelNorm {
    /// Freshly initialized statistics: mean 0, variance 1, scale 1, shift 0.
    pub fn new(channels: usize) -> Self {
        ChannelNorm {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.last_dim();
        if c != self.scale.len() {
            return Err(Error::dim("channel_norm", x.shape(), self.scale.shape()));
        }
        let mut out = x.clone();
        let (m, v, g, b) = (
            self.running_mean.data(),
            self.running_var.data(),
            self.scale.data(),
            self.shift.data(),
        );
        for r in 0..out.rows() {
            for (ch, val) in out.row_mut(r).iter_mut().enumerate() {
                *val = g[ch] * (*val - m[ch]) / (v[ch] + self.eps).sqrt() + b[ch];
            }
        }
        Ok(out)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2× average pooling. Height and width must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Argument(format!(
            "avg_pool2 needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let at = |yy: usize, xc: usize| xd[(yy * w + xc) * c + ch];
                let s = at(2 * y, 2 * xx)
                    + at(2 * y, 2 * xx + 1)
                    + at(2 * y + 1, 2 * xx)
                    + at(2 * y + 1, 2 * xx + 1);
                out[(y * ow + xx) * c + ch] = 0.25 * s;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// 2× nearest-neighbour upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * ow + xx) * c;
            out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Concatenate two maps with equal spatial size along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [h, w, ca] = a.dims3("concat_channels")?;
    let [h2, w2, cb] = b.dims3("concat_channels")?;
    if h != h2 || w != w2 {
        return Err(Error::dim("concat_channels", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        out.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::new(vec![h, w, ca + cb], out)
}
