//! 3D ResNet-18: the canonical 2D layout inflated to 3D, with basic blocks
//! (2, 2, 2, 2) at widths 64/128/256/512. Variable names follow the
//! PyTorch ResNet convention (`conv1`, `bn1`, `layer1.0.conv1`, ...) so
//! externally pretrained weight files map almost one-to-one.

use std::path::Path;

use tch::nn;
use tch::Tensor;

use crate::error::{Error, Result};

use super::ModelConfig;

const BASE_WIDTHS: [i64; 4] = [64, 128, 256, 512];
const BLOCKS_PER_LAYER: i64 = 2;
const BASE_EMBED: i64 = 128;

struct BasicBlock {
    conv1: nn::Conv3D,
    bn1: nn::BatchNorm,
    conv2: nn::Conv3D,
    bn2: nn::BatchNorm,
    downsample: Option<(nn::Conv3D, nn::BatchNorm)>,
}

impl BasicBlock {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64, stride: i64) -> BasicBlock {
        let conv_cfg = |stride| nn::ConvConfig { stride, padding: 1, bias: false, ..Default::default() };
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                nn::conv3d(
                    p / "downsample" / 0,
                    in_ch,
                    out_ch,
                    1,
                    nn::ConvConfig { stride, bias: false, ..Default::default() },
                ),
                nn::batch_norm3d(p / "downsample" / 1, out_ch, Default::default()),
            )
        });
        BasicBlock {
            conv1: nn::conv3d(p / "conv1", in_ch, out_ch, 3, conv_cfg(stride)),
            bn1: nn::batch_norm3d(p / "bn1", out_ch, Default::default()),
            conv2: nn::conv3d(p / "conv2", out_ch, out_ch, 3, conv_cfg(1)),
            bn2: nn::batch_norm3d(p / "bn2", out_ch, Default::default()),
            downsample,
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let identity = match &self.downsample {
            Some((conv, bn)) => xs.apply(conv).apply_t(bn, train),
            None => xs.shallow_clone(),
        };
        let out = xs
            .apply(&self.conv1)
            .apply_t(&self.bn1, train)
            .relu()
            .apply(&self.conv2)
            .apply_t(&self.bn2, train);
        (out + identity).relu()
    }
}

/// ResNet-18 trunk; in embedding mode the pooled 512-D feature is projected
/// to 128-D for hybrid fusion, otherwise a classifier head follows.
pub struct ResNet3d {
    conv1: nn::Conv3D,
    bn1: nn::BatchNorm,
    layers: Vec<Vec<BasicBlock>>,
    embed_fc: Option<nn::Linear>,
    head: Option<nn::Linear>,
    embed_dim: i64,
}

impl ResNet3d {
    /// `embedding_mode` replaces the classifier with a 128-D projection.
    pub fn new(p: &nn::Path, cfg: &ModelConfig, embedding_mode: bool) -> Result<ResNet3d> {
        cfg.validate()?;
        let widths: Vec<i64> = BASE_WIDTHS.iter().map(|&w| cfg.scaled(w)).collect();
        let conv1 = nn::conv3d(
            p / "conv1",
            cfg.in_channels,
            widths[0],
            7,
            nn::ConvConfig { stride: 2, padding: 3, bias: false, ..Default::default() },
        );
        let bn1 = nn::batch_norm3d(p / "bn1", widths[0], Default::default());
        let mut layers = Vec::new();
        let mut in_ch = widths[0];
        for (i, &out_ch) in widths.iter().enumerate() {
            let lp = p / format!("layer{}", i + 1);
            let mut blocks = Vec::new();
            for b in 0..BLOCKS_PER_LAYER {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&(&lp / b), in_ch, out_ch, stride));
                in_ch = out_ch;
            }
            layers.push(blocks);
        }
        let (embed_fc, head, embed_dim) = if embedding_mode {
            let dim = cfg.scaled(BASE_EMBED);
            (Some(nn::linear(p / "embed_fc", in_ch, dim, Default::default())), None, dim)
        } else {
            (None, Some(nn::linear(p / "fc", in_ch, cfg.num_classes, Default::default())), in_ch)
        };
        Ok(ResNet3d { conv1, bn1, layers, embed_fc, head, embed_dim })
    }

    pub fn embed_dim(&self) -> i64 {
        self.embed_dim
    }

    fn trunk(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut out = xs
            .apply(&self.conv1)
            .apply_t(&self.bn1, train)
            .relu()
            .max_pool3d(3, 2, 1, 1, false);
        for layer in &self.layers {
            for block in layer {
                out = block.forward_t(&out, train);
            }
        }
        out.adaptive_avg_pool3d([1, 1, 1]).flatten(1, -1)
    }

    /// Embedding-mode output: pooled feature projected to 128-D (scaled).
    pub fn embed_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let pooled = self.trunk(xs, train);
        match &self.embed_fc {
            Some(fc) => pooled.apply(fc),
            None => pooled,
        }
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let pooled = self.trunk(xs, train);
        pooled.apply(self.head.as_ref().expect("standalone ResNet has a head"))
    }
}

/// Load backbone weights from an external ResNet-18 file into `vs`.
///
/// Name mapping: a leading `module.` prefix is stripped; the classifier
/// (`fc.*`) is skipped so `num_classes` stays free; everything else must
/// match an existing variable by name and shape. Accepts `.safetensors`
/// files or multi-tensor archives saved by this crate. Returns the number
/// of tensors copied.
pub fn load_resnet_pretrained(vs: &nn::VarStore, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let named: Vec<(String, Tensor)> = if path.extension().is_some_and(|e| e == "safetensors") {
        Tensor::read_safetensors(path)?
    } else {
        Tensor::load_multi(path)?
    };
    let vars = vs.variables();
    let mut loaded = 0usize;
    tch::no_grad(|| -> Result<()> {
        for (name, tensor) in &named {
            let mapped = name.strip_prefix("module.").unwrap_or(name);
            if mapped.starts_with("fc.") {
                continue;
            }
            // VarStore flattens path separators to '.', matching PyTorch keys
            let Some(var) = vars.get(mapped) else {
                continue;
            };
            if var.size() != tensor.size() {
                return Err(Error::Config(format!(
                    "pretrained tensor {mapped} has shape {:?}, model expects {:?}",
                    tensor.size(),
                    var.size()
                )));
            }
            var.shallow_clone().copy_(tensor);
            loaded += 1;
        }
        Ok(())
    })?;
    if loaded == 0 {
        return Err(Error::Config(format!(
            "no tensors in {} matched the resnet18 backbone",
            path.display()
        )));
    }
    Ok(loaded)
}
