use candle_core::{Result, Tensor};
use candle_nn::{BatchNorm, VarBuilder};

use super::layers::{batch_norm, bn_forward, global_avg_pool, Conv, ConvSpec};
use super::Backbone;

const EPS: f64 = 1e-5;

/// Stage table for width 1.4 / depth 1.8:
/// (kernel, stride, expansion, out channels, repeats).
const STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (3, 1, 1, 24, 2),
    (3, 2, 6, 32, 4),
    (5, 2, 6, 56, 4),
    (3, 2, 6, 112, 6),
    (5, 1, 6, 160, 6),
    (5, 2, 6, 272, 8),
    (3, 1, 6, 448, 2),
];
const STEM: usize = 48;
const HEAD: usize = 1792;

struct SqueezeExcite {
    reduce: Conv,
    expand: Conv,
}

impl SqueezeExcite {
    fn new(channels: usize, squeeze: usize, vb: VarBuilder) -> Result<Self> {
        Ok(SqueezeExcite {
            reduce: ConvSpec::new(channels, squeeze, 1).bias().build(vb.pp("conv_reduce"))?,
            expand: ConvSpec::new(squeeze, channels, 1).bias().build(vb.pp("conv_expand"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let s = self.reduce.forward(&s)?.silu()?;
        let gate = candle_nn::ops::sigmoid(&self.expand.forward(&s)?)?;
        x.broadcast_mul(&gate)
    }
}

enum Block {
    /// Expansion 1: depthwise, SE, pointwise projection.
    DepthwiseSeparable {
        conv_dw: Conv,
        bn1: BatchNorm,
        se: SqueezeExcite,
        conv_pw: Conv,
        bn2: BatchNorm,
        skip: bool,
    },
    /// MBConv: pointwise expansion, depthwise, SE, pointwise projection.
    InvertedResidual {
        conv_pw: Conv,
        bn1: BatchNorm,
        conv_dw: Conv,
        bn2: BatchNorm,
        se: SqueezeExcite,
        conv_pwl: Conv,
        bn3: BatchNorm,
        skip: bool,
    },
}

impl Block {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, exp: usize, vb: VarBuilder) -> Result<Self> {
        let skip = stride == 1 && cin == cout;
        let squeeze = (cin / 4).max(1);
        if exp == 1 {
            return Ok(Block::DepthwiseSeparable {
                conv_dw: ConvSpec::new(cin, cin, k).stride(stride).depthwise().build(vb.pp("conv_dw"))?,
                bn1: batch_norm(cin, EPS, vb.pp("bn1"))?,
                se: SqueezeExcite::new(cin, squeeze, vb.pp("se"))?,
                conv_pw: ConvSpec::new(cin, cout, 1).build(vb.pp("conv_pw"))?,
                bn2: batch_norm(cout, EPS, vb.pp("bn2"))?,
                skip,
            });
        }
        let mid = cin * exp;
        Ok(Block::InvertedResidual {
            conv_pw: ConvSpec::new(cin, mid, 1).build(vb.pp("conv_pw"))?,
            bn1: batch_norm(mid, EPS, vb.pp("bn1"))?,
            conv_dw: ConvSpec::new(mid, mid, k).stride(stride).depthwise().build(vb.pp("conv_dw"))?,
            bn2: batch_norm(mid, EPS, vb.pp("bn2"))?,
            se: SqueezeExcite::new(mid, squeeze, vb.pp("se"))?,
            conv_pwl: ConvSpec::new(mid, cout, 1).build(vb.pp("conv_pwl"))?,
            bn3: batch_norm(cout, EPS, vb.pp("bn3"))?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (y, skip) = match self {
            Block::DepthwiseSeparable { conv_dw, bn1, se, conv_pw, bn2, skip } => {
                let y = bn_forward(bn1, &conv_dw.forward(x)?, train)?.silu()?;
                let y = se.forward(&y)?;
                (bn_forward(bn2, &conv_pw.forward(&y)?, train)?, *skip)
            }
            Block::InvertedResidual { conv_pw, bn1, conv_dw, bn2, se, conv_pwl, bn3, skip } => {
                let y = bn_forward(bn1, &conv_pw.forward(x)?, train)?.silu()?;
                let y = bn_forward(bn2, &conv_dw.forward(&y)?, train)?.silu()?;
                let y = se.forward(&y)?;
                (bn_forward(bn3, &conv_pwl.forward(&y)?, train)?, *skip)
            }
        };
        if skip {
            y + x
        } else {
            Ok(y)
        }
    }
}

/// EfficientNet-B4 (MBConv with squeeze-excitation and SiLU).
pub struct EfficientNetB4 {
    conv_stem: Conv,
    bn1: BatchNorm,
    blocks: Vec<Block>,
    conv_head: Conv,
    bn2: BatchNorm,
}

impl EfficientNetB4 {
    pub const FEATURE_DIM: usize = HEAD;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = STEM;
        for (s, &(k, stride, exp, cout, repeats)) in STAGES.iter().enumerate() {
            for i in 0..repeats {
                let st = if i == 0 { stride } else { 1 };
                blocks.push(Block::new(cin, cout, k, st, exp, vb.pp(format!("blocks.{s}.{i}")))?);
                cin = cout;
            }
        }
        Ok(EfficientNetB4 {
            conv_stem: ConvSpec::new(3, STEM, 3).stride(2).build(vb.pp("conv_stem"))?,
            bn1: batch_norm(STEM, EPS, vb.pp("bn1"))?,
            blocks,
            conv_head: ConvSpec::new(cin, HEAD, 1).build(vb.pp("conv_head"))?,
            bn2: batch_norm(HEAD, EPS, vb.pp("bn2"))?,
        })
    }
}

impl Backbone for EfficientNetB4 {
    fn name(&self) -> &'static str {
        "efficientnet_b4"
    }

    fn feature_dim(&self) -> usize {
        Self::FEATURE_DIM
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = bn_forward(&self.bn1, &self.conv_stem.forward(x)?, train)?.silu()?;
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        let y = bn_forward(&self.bn2, &self.conv_head.forward(&y)?, train)?.silu()?;
        global_avg_pool(&y)
    }
}
