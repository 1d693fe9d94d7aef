//! 3D EfficientNet-B0: the canonical MBConv stage layout inflated to 3D
//! (squeeze-and-excitation, expansion convs, SiLU activations). Stage
//! widths follow the published B0 table and scale with `width_multiplier`
//! by simple rounding.

use tch::nn;
use tch::Tensor;

use crate::error::Result;

use super::ModelConfig;

// (expand_ratio, channels, repeats, stride, kernel)
const STAGES: [(i64, i64, i64, i64, i64); 7] = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
];
const STEM_CH: i64 = 32;
const HEAD_CH: i64 = 1280;
const SE_RATIO: f64 = 0.25;

struct SqueezeExcite {
    reduce: nn::Conv3D,
    expand: nn::Conv3D,
}

impl SqueezeExcite {
    fn new(p: &nn::Path, channels: i64, se_channels: i64) -> SqueezeExcite {
        SqueezeExcite {
            reduce: nn::conv3d(p / "reduce", channels, se_channels, 1, Default::default()),
            expand: nn::conv3d(p / "expand", se_channels, channels, 1, Default::default()),
        }
    }

    fn forward(&self, xs: &Tensor) -> Tensor {
        let scale = xs
            .adaptive_avg_pool3d([1, 1, 1])
            .apply(&self.reduce)
            .silu()
            .apply(&self.expand)
            .sigmoid();
        xs * scale
    }
}

struct MbConv {
    expand: Option<(nn::Conv3D, nn::BatchNorm)>,
    depthwise: nn::Conv3D,
    dw_bn: nn::BatchNorm,
    se: SqueezeExcite,
    project: nn::Conv3D,
    proj_bn: nn::BatchNorm,
    skip: bool,
}

impl MbConv {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64, expand_ratio: i64, stride: i64, kernel: i64) -> MbConv {
        let mid = in_ch * expand_ratio;
        let expand = (expand_ratio != 1).then(|| {
            (
                nn::conv3d(
                    p / "expand_conv",
                    in_ch,
                    mid,
                    1,
                    nn::ConvConfig { bias: false, ..Default::default() },
                ),
                nn::batch_norm3d(p / "expand_bn", mid, Default::default()),
            )
        });
        let depthwise = nn::conv3d(
            p / "dw_conv",
            mid,
            mid,
            kernel,
            nn::ConvConfig {
                stride,
                padding: kernel / 2,
                groups: mid,
                bias: false,
                ..Default::default()
            },
        );
        let se_channels = ((in_ch as f64 * SE_RATIO).round() as i64).max(1);
        MbConv {
            expand,
            depthwise,
            dw_bn: nn::batch_norm3d(p / "dw_bn", mid, Default::default()),
            se: SqueezeExcite::new(&(p / "se"), mid, se_channels),
            project: nn::conv3d(
                p / "project_conv",
                mid,
                out_ch,
                1,
                nn::ConvConfig { bias: false, ..Default::default() },
            ),
            proj_bn: nn::batch_norm3d(p / "project_bn", out_ch, Default::default()),
            skip: stride == 1 && in_ch == out_ch,
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut out = match &self.expand {
            Some((conv, bn)) => xs.apply(conv).apply_t(bn, train).silu(),
            None => xs.shallow_clone(),
        };
        out = out.apply(&self.depthwise).apply_t(&self.dw_bn, train).silu();
        out = self.se.forward(&out);
        out = out.apply(&self.project).apply_t(&self.proj_bn, train);
        if self.skip {
            out += xs;
        }
        out
    }
}

/// EfficientNet-B0 trunk with pooled head feature and classifier.
pub struct EfficientNet3d {
    stem_conv: nn::Conv3D,
    stem_bn: nn::BatchNorm,
    blocks: Vec<MbConv>,
    head_conv: nn::Conv3D,
    head_bn: nn::BatchNorm,
    classifier: nn::Linear,
    dropout: f64,
}

impl EfficientNet3d {
    pub fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<EfficientNet3d> {
        cfg.validate()?;
        let stem_ch = cfg.scaled(STEM_CH);
        let stem_conv = nn::conv3d(
            p / "stem_conv",
            cfg.in_channels,
            stem_ch,
            3,
            nn::ConvConfig { stride: 2, padding: 1, bias: false, ..Default::default() },
        );
        let stem_bn = nn::batch_norm3d(p / "stem_bn", stem_ch, Default::default());

        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (s, &(expand, channels, repeats, stride, kernel)) in STAGES.iter().enumerate() {
            let out_ch = cfg.scaled(channels);
            for r in 0..repeats {
                let stride = if r == 0 { stride } else { 1 };
                let bp = p / "stage" / (s as i64) / "block" / r;
                blocks.push(MbConv::new(&bp, in_ch, out_ch, expand, stride, kernel));
                in_ch = out_ch;
            }
        }

        let head_ch = cfg.scaled(HEAD_CH);
        Ok(EfficientNet3d {
            stem_conv,
            stem_bn,
            blocks,
            head_conv: nn::conv3d(
                p / "head_conv",
                in_ch,
                head_ch,
                1,
                nn::ConvConfig { bias: false, ..Default::default() },
            ),
            head_bn: nn::batch_norm3d(p / "head_bn", head_ch, Default::default()),
            classifier: nn::linear(p / "classifier", head_ch, cfg.num_classes, Default::default()),
            dropout: cfg.dropout,
        })
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut out = xs.apply(&self.stem_conv).apply_t(&self.stem_bn, train).silu();
        for block in &self.blocks {
            out = block.forward_t(&out, train);
        }
        out.apply(&self.head_conv)
            .apply_t(&self.head_bn, train)
            .silu()
            .adaptive_avg_pool3d([1, 1, 1])
            .flatten(1, -1)
            .dropout(self.dropout, train)
            .apply(&self.classifier)
    }
}
