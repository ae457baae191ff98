use candle_core::{Result, Tensor};
use candle_nn::{Init, VarBuilder};

use super::layers::{global_avg_pool, Conv, ConvSpec, LayerNorm};
use super::Backbone;

const EPS: f64 = 1e-6;
const DEPTHS: [usize; 4] = [3, 3, 9, 3];
const DIMS: [usize; 4] = [96, 192, 384, 768];
const LAYER_SCALE: f64 = 1e-6;
const TRUNC_STD: Init = Init::Randn {
    mean: 0.0,
    stdev: 0.02,
};

/// Pointwise layer stored as a `(out, in)` matrix, applied as a 1x1 conv.
struct Pointwise {
    weight: Tensor,
    bias: Tensor,
}

impl Pointwise {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Pointwise {
            weight: vb.get_with_hints((cout, cin), "weight", TRUNC_STD)?,
            bias: vb.get_with_hints(cout, "bias", Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cout, cin) = self.weight.dims2()?;
        x.conv2d(&self.weight.reshape((cout, cin, 1, 1))?, 0, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)
    }
}

struct Block {
    conv_dw: Conv,
    norm: LayerNorm,
    fc1: Pointwise,
    fc2: Pointwise,
    gamma: Tensor,
}

impl Block {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Block {
            conv_dw: ConvSpec::new(dim, dim, 7)
                .depthwise()
                .bias()
                .init(TRUNC_STD)
                .build(vb.pp("conv_dw"))?,
            norm: LayerNorm::new(dim, EPS, vb.pp("norm"))?,
            fc1: Pointwise::new(dim, 4 * dim, vb.pp("mlp.fc1"))?,
            fc2: Pointwise::new(4 * dim, dim, vb.pp("mlp.fc2"))?,
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(LAYER_SCALE))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv_dw.forward(x)?;
        let y = self.norm.forward_dim(&y, 1)?;
        let y = self.fc2.forward(&self.fc1.forward(&y)?.gelu_erf()?)?;
        let y = y.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?;
        x + y
    }
}

struct Stage {
    downsample: Option<(LayerNorm, Conv)>,
    blocks: Vec<Block>,
}

/// ConvNeXt-Tiny: patchify stem, stages 3-3-9-3 at widths 96-192-384-768,
/// blocks of depthwise 7x7, channel LayerNorm and an inverted MLP.
pub struct ConvNextTiny {
    stem_conv: Conv,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    head_norm: LayerNorm,
}

impl ConvNextTiny {
    pub const FEATURE_DIM: usize = 768;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, (&depth, &dim)) in DEPTHS.iter().zip(&DIMS).enumerate() {
            let vbs = vb.pp(format!("stages.{i}"));
            let downsample = if i == 0 {
                None
            } else {
                Some((
                    LayerNorm::new(DIMS[i - 1], EPS, vbs.pp("downsample.0"))?,
                    ConvSpec::new(DIMS[i - 1], dim, 2)
                        .stride(2)
                        .padding(0)
                        .bias()
                        .init(TRUNC_STD)
                        .build(vbs.pp("downsample.1"))?,
                ))
            };
            let blocks = (0..depth)
                .map(|j| Block::new(dim, vbs.pp(format!("blocks.{j}"))))
                .collect::<Result<_>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(ConvNextTiny {
            stem_conv: ConvSpec::new(3, DIMS[0], 4)
                .stride(4)
                .padding(0)
                .bias()
                .init(TRUNC_STD)
                .build(vb.pp("stem.0"))?,
            stem_norm: LayerNorm::new(DIMS[0], EPS, vb.pp("stem.1"))?,
            stages,
            head_norm: LayerNorm::new(DIMS[3], EPS, vb.pp("head.norm"))?,
        })
    }
}

impl Backbone for ConvNextTiny {
    fn name(&self) -> &'static str {
        "convnext_tiny"
    }

    fn feature_dim(&self) -> usize {
        Self::FEATURE_DIM
    }

    /// No batch statistics anywhere, so `train` has no effect.
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut y = self.stem_norm.forward_dim(&self.stem_conv.forward(x)?, 1)?;
        for stage in &self.stages {
            if let Some((norm, conv)) = &stage.downsample {
                y = conv.forward(&norm.forward_dim(&y, 1)?)?;
            }
            for b in &stage.blocks {
                y = b.forward(&y)?;
            }
        }
        self.head_norm.forward_last(&global_avg_pool(&y)?)
    }
}
