//! 3D Vision Transformer branch: 16^3 patch embedding, class token, learned
//! positional embeddings, 12 pre-norm blocks with 12 heads and a 4x MLP,
//! final layer norm, class-token readout. Head count, feed-forward width
//! and readout are the canonical ViT-Base choices.

use tch::nn;
use tch::{Kind, Tensor};

use crate::error::Result;

use super::{patchify, transformer_init, ModelConfig, PATCH_SIZE};

const BASE_DIM: i64 = 768;
const DEPTH: i64 = 12;
const HEADS: i64 = 12;
const MLP_RATIO: i64 = 4;

struct Attention {
    qkv: nn::Linear,
    proj: nn::Linear,
    heads: i64,
    scale: f64,
}

impl Attention {
    fn new(p: &nn::Path, dim: i64, heads: i64) -> Attention {
        let cfg = nn::LinearConfig { ws_init: transformer_init(), ..Default::default() };
        Attention {
            qkv: nn::linear(p / "qkv", dim, 3 * dim, cfg),
            proj: nn::linear(p / "proj", dim, dim, cfg),
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        }
    }

    fn forward(&self, xs: &Tensor) -> Tensor {
        let (n, t, e) = xs.size3().unwrap();
        let head_dim = e / self.heads;
        let qkv = xs
            .apply(&self.qkv)
            .reshape([n, t, 3, self.heads, head_dim])
            .permute([2, 0, 3, 1, 4]);
        let (q, k, v) = (qkv.get(0), qkv.get(1), qkv.get(2));
        let attn = (q.matmul(&k.transpose(-2, -1)) * self.scale).softmax(-1, Kind::Float);
        attn.matmul(&v)
            .transpose(1, 2)
            .reshape([n, t, e])
            .apply(&self.proj)
    }
}

struct Block {
    norm1: nn::LayerNorm,
    attn: Attention,
    norm2: nn::LayerNorm,
    mlp_fc1: nn::Linear,
    mlp_fc2: nn::Linear,
}

impl Block {
    fn new(p: &nn::Path, dim: i64, heads: i64) -> Block {
        let cfg = nn::LinearConfig { ws_init: transformer_init(), ..Default::default() };
        Block {
            norm1: nn::layer_norm(p / "norm1", vec![dim], Default::default()),
            attn: Attention::new(&(p / "attn"), dim, heads),
            norm2: nn::layer_norm(p / "norm2", vec![dim], Default::default()),
            mlp_fc1: nn::linear(p / "mlp_fc1", dim, MLP_RATIO * dim, cfg),
            mlp_fc2: nn::linear(p / "mlp_fc2", MLP_RATIO * dim, dim, cfg),
        }
    }

    fn forward(&self, xs: &Tensor) -> Tensor {
        let xs = xs + self.attn.forward(&xs.apply(&self.norm1));
        let mlp = xs.apply(&self.norm2).apply(&self.mlp_fc1).gelu("none").apply(&self.mlp_fc2);
        xs + mlp
    }
}

/// The ViT branch; `head` is present only in standalone mode.
pub struct Vit3d {
    patch_embed: nn::Linear,
    class_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: nn::LayerNorm,
    head: Option<nn::Linear>,
    dim: i64,
}

impl Vit3d {
    pub fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<Vit3d> {
        Vit3d::build(p, cfg, cfg.arch == super::Arch::Vit)
    }

    fn build(p: &nn::Path, cfg: &ModelConfig, standalone: bool) -> Result<Vit3d> {
        cfg.validate()?;
        let dim = cfg.scaled(BASE_DIM);
        let heads = if dim % HEADS == 0 { HEADS } else { 1 };
        let (h, w, d) = cfg.input_shape;
        let tokens = (h / PATCH_SIZE) * (w / PATCH_SIZE) * (d / PATCH_SIZE);
        let patch_dim = cfg.in_channels * PATCH_SIZE.pow(3);

        let lin_cfg = nn::LinearConfig { ws_init: transformer_init(), ..Default::default() };
        let patch_embed = nn::linear(p / "patch_embed", patch_dim, dim, lin_cfg);
        let class_token = p.var("class_token", &[1, 1, dim], transformer_init());
        let pos_embed = p.var("pos_embed", &[1, tokens + 1, dim], transformer_init());
        let blocks = (0..DEPTH)
            .map(|i| Block::new(&(p / "blocks" / i), dim, heads))
            .collect();
        let norm = nn::layer_norm(p / "norm", vec![dim], Default::default());
        let head = standalone.then(|| nn::linear(p / "head", dim, cfg.num_classes, lin_cfg));
        Ok(Vit3d { patch_embed, class_token, pos_embed, blocks, norm, head, dim })
    }

    pub fn embed_dim(&self) -> i64 {
        self.dim
    }

    /// Class-token embedding of shape (N, dim).
    pub fn embed_t(&self, xs: &Tensor, _train: bool) -> Tensor {
        let tokens = patchify(xs).expect("input shape validated at construction");
        let n = tokens.size()[0];
        let embedded = tokens.apply(&self.patch_embed);
        let cls = self.class_token.expand([n, 1, self.dim], false);
        let mut seq = Tensor::cat(&[cls, embedded], 1) + &self.pos_embed;
        for block in &self.blocks {
            seq = block.forward(&seq);
        }
        seq.apply(&self.norm).select(1, 0)
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let embed = self.embed_t(xs, train);
        embed.apply(self.head.as_ref().expect("standalone ViT has a head"))
    }
}
