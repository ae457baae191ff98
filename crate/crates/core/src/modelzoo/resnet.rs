use candle_core::{Result, Tensor};
use candle_nn::{BatchNorm, VarBuilder};

use super::layers::{batch_norm, batch_norm_zero_init, bn_forward, global_avg_pool, max_pool_relu, Conv, ConvSpec};
use super::Backbone;

const EPS: f64 = 1e-5;

struct Bottleneck {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    conv3: Conv,
    bn3: BatchNorm,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn new(cin: usize, planes: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let cout = planes * 4;
        let downsample = if stride != 1 || cin != cout {
            Some((
                ConvSpec::new(cin, cout, 1).stride(stride).build(vb.pp("downsample.0"))?,
                batch_norm(cout, EPS, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: ConvSpec::new(cin, planes, 1).build(vb.pp("conv1"))?,
            bn1: batch_norm(planes, EPS, vb.pp("bn1"))?,
            conv2: ConvSpec::new(planes, planes, 3).stride(stride).build(vb.pp("conv2"))?,
            bn2: batch_norm(planes, EPS, vb.pp("bn2"))?,
            conv3: ConvSpec::new(planes, cout, 1).build(vb.pp("conv3"))?,
            bn3: batch_norm_zero_init(cout, EPS, vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = bn_forward(&self.bn1, &self.conv1.forward(x)?, train)?.relu()?;
        let y = bn_forward(&self.bn2, &self.conv2.forward(&y)?, train)?.relu()?;
        let y = bn_forward(&self.bn3, &self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn_forward(bn, &conv.forward(x)?, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

/// ResNet-50 (bottleneck blocks 3-4-6-3, stride on the 3x3 conv).
pub struct ResNet50 {
    conv1: Conv,
    bn1: BatchNorm,
    blocks: Vec<Bottleneck>,
}

impl ResNet50 {
    pub const FEATURE_DIM: usize = 2048;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, (planes, depth)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let vbb = vb.pp(format!("layer{}.{i}", stage + 1));
                blocks.push(Bottleneck::new(cin, planes, stride, vbb)?);
                cin = planes * 4;
            }
        }
        Ok(ResNet50 {
            conv1: ConvSpec::new(3, 64, 7).stride(2).padding(3).build(vb.pp("conv1"))?,
            bn1: batch_norm(64, EPS, vb.pp("bn1"))?,
            blocks,
        })
    }
}

impl Backbone for ResNet50 {
    fn name(&self) -> &'static str {
        "resnet50"
    }

    fn feature_dim(&self) -> usize {
        Self::FEATURE_DIM
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = bn_forward(&self.bn1, &self.conv1.forward(x)?, train)?.relu()?;
        y = max_pool_relu(&y, 3, 2, 1)?;
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        global_avg_pool(&y)
    }
}
