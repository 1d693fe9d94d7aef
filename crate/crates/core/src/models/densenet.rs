//! 3D DenseNet-121 branch: block config (6, 12, 24, 16), growth rate 32,
//! global average pooling, then a fully connected layer to a 128-D
//! embedding; standalone mode adds a classification head on top.

use tch::nn;
use tch::Tensor;

use crate::error::Result;

use super::ModelConfig;

const BLOCK_CONFIG: [i64; 4] = [6, 12, 24, 16];
const BASE_GROWTH: i64 = 32;
const BASE_INIT_FEATURES: i64 = 64;
const BASE_EMBED: i64 = 128;
const BN_SIZE: i64 = 4;

struct DenseLayer {
    bn1: nn::BatchNorm,
    conv1: nn::Conv3D,
    bn2: nn::BatchNorm,
    conv2: nn::Conv3D,
}

impl DenseLayer {
    fn new(p: &nn::Path, in_ch: i64, growth: i64) -> DenseLayer {
        let bottleneck = BN_SIZE * growth;
        DenseLayer {
            bn1: nn::batch_norm3d(p / "bn1", in_ch, Default::default()),
            conv1: nn::conv3d(
                p / "conv1",
                in_ch,
                bottleneck,
                1,
                nn::ConvConfig { bias: false, ..Default::default() },
            ),
            bn2: nn::batch_norm3d(p / "bn2", bottleneck, Default::default()),
            conv2: nn::conv3d(
                p / "conv2",
                bottleneck,
                growth,
                3,
                nn::ConvConfig { padding: 1, bias: false, ..Default::default() },
            ),
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        xs.apply_t(&self.bn1, train)
            .relu()
            .apply(&self.conv1)
            .apply_t(&self.bn2, train)
            .relu()
            .apply(&self.conv2)
    }
}

struct Transition {
    bn: nn::BatchNorm,
    conv: nn::Conv3D,
}

impl Transition {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64) -> Transition {
        Transition {
            bn: nn::batch_norm3d(p / "bn", in_ch, Default::default()),
            conv: nn::conv3d(
                p / "conv",
                in_ch,
                out_ch,
                1,
                nn::ConvConfig { bias: false, ..Default::default() },
            ),
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        xs.apply_t(&self.bn, train)
            .relu()
            .apply(&self.conv)
            .avg_pool3d(2, 2, 0, false, true, None)
    }
}

/// DenseNet-121 trunk with an embedding FC; optional classifier head.
pub struct DenseNet3d {
    stem_conv: nn::Conv3D,
    stem_bn: nn::BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: nn::BatchNorm,
    embed_fc: nn::Linear,
    head: Option<nn::Linear>,
    embed_dim: i64,
}

impl DenseNet3d {
    pub fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<DenseNet3d> {
        cfg.validate()?;
        let standalone = cfg.arch == super::Arch::Densenet121;
        let growth = cfg.scaled(BASE_GROWTH);
        let init_features = cfg.scaled(BASE_INIT_FEATURES);
        let embed_dim = cfg.scaled(BASE_EMBED);

        let stem_conv = nn::conv3d(
            p / "stem_conv",
            cfg.in_channels,
            init_features,
            7,
            nn::ConvConfig { stride: 2, padding: 3, bias: false, ..Default::default() },
        );
        let stem_bn = nn::batch_norm3d(p / "stem_bn", init_features, Default::default());

        let mut channels = init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &layers) in BLOCK_CONFIG.iter().enumerate() {
            let bp = p / "block" / (b as i64);
            let mut block = Vec::new();
            for l in 0..layers {
                block.push(DenseLayer::new(&(&bp / l), channels, growth));
                channels += growth;
            }
            blocks.push(block);
            if b + 1 < BLOCK_CONFIG.len() {
                let out = channels / 2;
                transitions.push(Transition::new(&(p / "transition" / (b as i64)), channels, out));
                channels = out;
            }
        }

        let final_bn = nn::batch_norm3d(p / "final_bn", channels, Default::default());
        let embed_fc = nn::linear(p / "embed_fc", channels, embed_dim, Default::default());
        let head =
            standalone.then(|| nn::linear(p / "head", embed_dim, cfg.num_classes, Default::default()));
        Ok(DenseNet3d { stem_conv, stem_bn, blocks, transitions, final_bn, embed_fc, head, embed_dim })
    }

    pub fn embed_dim(&self) -> i64 {
        self.embed_dim
    }

    /// 128-D (scaled) embedding from global average pooling + FC.
    pub fn embed_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut features = xs
            .apply(&self.stem_conv)
            .apply_t(&self.stem_bn, train)
            .relu()
            .max_pool3d(3, 2, 1, 1, false);
        for (b, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let new = layer.forward_t(&features, train);
                features = Tensor::cat(&[features, new], 1);
            }
            if let Some(tr) = self.transitions.get(b) {
                features = tr.forward_t(&features, train);
            }
        }
        let pooled = features
            .apply_t(&self.final_bn, train)
            .relu()
            .adaptive_avg_pool3d([1, 1, 1])
            .flatten(1, -1);
        pooled.apply(&self.embed_fc)
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let embed = self.embed_t(xs, train);
        embed.apply(self.head.as_ref().expect("standalone DenseNet has a head"))
    }
}
