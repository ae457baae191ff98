//! Building blocks shared by the backbones. Every op here has a backward
//! pass, so the same layers serve frozen and fine-tuned models.

use candle_core::{Result, Tensor, D};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::{BatchNorm, BatchNormConfig, Init, ModuleT, VarBuilder};

/// He-normal, fan-out, ReLU gain.
pub const KAIMING_FAN_OUT: Init = Init::Kaiming {
    dist: NormalOrUniform::Normal,
    fan: FanInOut::FanOut,
    non_linearity: NonLinearity::ReLU,
};

pub const KAIMING_FAN_IN: Init = candle_nn::init::DEFAULT_KAIMING_NORMAL;

pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    /// One filter per channel (`cin == cout`).
    pub depthwise: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: false,
            depthwise: false,
            init: KAIMING_FAN_OUT,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn build(self, vb: VarBuilder) -> Result<Conv> {
        let in_per_group = if self.depthwise { 1 } else { self.cin };
        if self.depthwise && self.cin != self.cout {
            candle_core::bail!("depthwise conv needs cin == cout");
        }
        let weight = vb.get_with_hints(
            (self.cout, in_per_group, self.kernel, self.kernel),
            "weight",
            self.init,
        )?;
        let bias = if self.bias {
            Some(vb.get_with_hints(self.cout, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            depthwise: self.depthwise,
        })
    }
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.depthwise {
            depthwise_conv(x, &self.weight, self.stride, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Depthwise convolution as a sum of `k^2` shifted, channel-scaled views of
/// the padded input. Grouped convolution in the tensor backend runs one
/// kernel per group, which is far slower for `groups == channels`.
pub fn depthwise_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let k = w.dim(2)?;
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let (hf, wf) = (h + 2 * padding + 1 - k, wd + 2 * padding + 1 - k);
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        let rows = xp.narrow(2, i, hf)?;
        for j in 0..k {
            let tap = w.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((1, c, 1, 1))?;
            let term = rows.narrow(3, j, wf)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    subsample(&acc.expect("kernel size >= 1"), stride)
}

/// Keep every `stride`-th row and column, starting at 0.
fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    x.pad_with_zeros(2, 0, ho * stride - h)?
        .pad_with_zeros(3, 0, wo * stride - w)?
        .reshape((b, c, ho, stride, wo, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, ho, wo))
}

pub fn batch_norm(channels: usize, eps: f64, vb: VarBuilder) -> Result<BatchNorm> {
    candle_nn::batch_norm(
        channels,
        BatchNormConfig {
            eps,
            remove_mean: true,
            affine: true,
            momentum: 0.1,
        },
        vb,
    )
}

/// Batch norm whose scale starts at zero, so a fresh residual branch adds
/// nothing and an untrained deep network keeps its activation scale.
pub fn batch_norm_zero_init(channels: usize, eps: f64, vb: VarBuilder) -> Result<BatchNorm> {
    // The builder hands back this variable when batch_norm asks for it.
    vb.get_with_hints(channels, "weight", Init::Const(0.0))?;
    batch_norm(channels, eps, vb)
}

pub fn bn_forward(bn: &BatchNorm, x: &Tensor, train: bool) -> Result<Tensor> {
    bn.forward_t(x, train)
}

/// Layer normalization over one dimension, built from differentiable ops.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }

    /// Normalize over `dim` of `x`; the affine parameters broadcast along it.
    pub fn forward_dim(&self, x: &Tensor, dim: usize) -> Result<Tensor> {
        let mean = x.mean_keepdim(dim)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(dim)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let mut shape = vec![1; x.rank()];
        shape[dim] = x.dim(dim)?;
        y.broadcast_mul(&self.weight.reshape(shape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(shape.as_slice())?)
    }

    pub fn forward_last(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_dim(x, x.rank() - 1)
    }
}

/// Max pool with zero padding, as an elementwise maximum over shifted views
/// (the backend's pooling op has no gradient for overlapping windows). Only
/// valid on non-negative inputs (after a ReLU), where zero padding never wins
/// over a real value.
pub fn max_pool_relu(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let (hf, wf) = (h + 2 * padding + 1 - k, w + 2 * padding + 1 - k);
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        let rows = xp.narrow(2, i, hf)?;
        for j in 0..k {
            let v = rows.narrow(3, j, wf)?;
            acc = Some(match acc {
                None => v.contiguous()?,
                Some(a) => a.maximum(&v)?,
            });
        }
    }
    subsample(&acc.expect("kernel size >= 1"), stride)
}

/// `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}
