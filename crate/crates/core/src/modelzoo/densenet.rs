use candle_core::{Result, Tensor};
use candle_nn::{BatchNorm, VarBuilder};

use super::layers::{
    batch_norm, bn_forward, global_avg_pool, max_pool_relu, Conv, ConvSpec, KAIMING_FAN_IN,
};
use super::Backbone;

const EPS: f64 = 1e-5;
const GROWTH: usize = 32;
const BN_SIZE: usize = 4;

struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv,
    norm2: BatchNorm,
    conv2: Conv,
}

impl DenseLayer {
    fn new(cin: usize, vb: VarBuilder) -> Result<Self> {
        let mid = BN_SIZE * GROWTH;
        Ok(DenseLayer {
            norm1: batch_norm(cin, EPS, vb.pp("norm1"))?,
            conv1: ConvSpec::new(cin, mid, 1).init(KAIMING_FAN_IN).build(vb.pp("conv1"))?,
            norm2: batch_norm(mid, EPS, vb.pp("norm2"))?,
            conv2: ConvSpec::new(mid, GROWTH, 3).init(KAIMING_FAN_IN).build(vb.pp("conv2"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(&bn_forward(&self.norm1, x, train)?.relu()?)?;
        self.conv2.forward(&bn_forward(&self.norm2, &y, train)?.relu()?)
    }
}

struct Transition {
    norm: BatchNorm,
    conv: Conv,
}

/// DenseNet-121: dense blocks of 6-12-24-16 layers, growth rate 32,
/// transitions halving channels and resolution.
pub struct DenseNet121 {
    conv0: Conv,
    norm0: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
}

impl DenseNet121 {
    pub const FEATURE_DIM: usize = 1024;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("features");
        let mut c = 64;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let depths = [6, 12, 24, 16];
        for (i, depth) in depths.iter().enumerate() {
            let vbb = vb.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::new();
            for j in 0..*depth {
                layers.push(DenseLayer::new(c, vbb.pp(format!("denselayer{}", j + 1)))?);
                c += GROWTH;
            }
            blocks.push(layers);
            if i + 1 < depths.len() {
                let vbt = vb.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: batch_norm(c, EPS, vbt.pp("norm"))?,
                    conv: ConvSpec::new(c, c / 2, 1).init(KAIMING_FAN_IN).build(vbt.pp("conv"))?,
                });
                c /= 2;
            }
        }
        debug_assert_eq!(c, Self::FEATURE_DIM);
        Ok(DenseNet121 {
            conv0: ConvSpec::new(3, 64, 7)
                .stride(2)
                .padding(3)
                .init(KAIMING_FAN_IN)
                .build(vb.pp("conv0"))?,
            norm0: batch_norm(64, EPS, vb.pp("norm0"))?,
            blocks,
            transitions,
            norm5: batch_norm(c, EPS, vb.pp("norm5"))?,
        })
    }
}

impl Backbone for DenseNet121 {
    fn name(&self) -> &'static str {
        "densenet121"
    }

    fn feature_dim(&self) -> usize {
        Self::FEATURE_DIM
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = bn_forward(&self.norm0, &self.conv0.forward(x)?, train)?.relu()?;
        let mut y = max_pool_relu(&y, 3, 2, 1)?;
        for (i, layers) in self.blocks.iter().enumerate() {
            let mut feats = vec![y];
            for layer in layers {
                let input = Tensor::cat(&feats, 1)?;
                feats.push(layer.forward(&input, train)?);
            }
            y = Tensor::cat(&feats, 1)?;
            if let Some(t) = self.transitions.get(i) {
                y = t.conv.forward(&bn_forward(&t.norm, &y, train)?.relu()?)?;
                y = y.avg_pool2d(2)?;
            }
        }
        global_avg_pool(&bn_forward(&self.norm5, &y, train)?.relu()?)
    }
}
