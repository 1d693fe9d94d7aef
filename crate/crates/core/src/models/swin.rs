//! 3D Swin Transformer: embed dim 96, depths (2, 2, 6, 2), heads
//! (3, 6, 12, 24), 4^3 windows clamped to the feature grid, cyclic-shifted
//! windows on alternate blocks, learned relative position bias, and patch
//! merging between stages. The pooled final feature (768-D at base width)
//! is the embedding used for hybrid fusion.
//!
//! Shifted windows use a plain cyclic roll without the boundary attention
//! mask; at these grid sizes the wrap-around leakage is accepted as a
//! documented simplification.

use tch::nn;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

use super::{transformer_init, ModelConfig};

const BASE_EMBED: i64 = 96;
const DEPTHS: [i64; 4] = [2, 2, 6, 2];
const HEADS: [i64; 4] = [3, 6, 12, 24];
const PATCH: i64 = 4;
const WINDOW: i64 = 4;
const MLP_RATIO: i64 = 4;

fn window_dims(grid: [i64; 3]) -> [i64; 3] {
    grid.map(|g| g.min(WINDOW))
}

struct WindowAttention {
    qkv: nn::Linear,
    proj: nn::Linear,
    /// Relative position bias (table, pair index); absent for single-token
    /// windows, where attention is constant and the bias has no effect.
    rel_bias: Option<(Tensor, Tensor)>,
    heads: i64,
    scale: f64,
}

impl WindowAttention {
    fn new(p: &nn::Path, dim: i64, heads: i64, window: [i64; 3]) -> WindowAttention {
        let cfg = nn::LinearConfig { ws_init: transformer_init(), ..Default::default() };
        let [wh, ww, wd] = window;
        let t = wh * ww * wd;
        let rel_bias = (t > 1).then(|| {
            let table_len = (2 * wh - 1) * (2 * ww - 1) * (2 * wd - 1);
            let table = p.var("rel_bias_table", &[table_len, heads], transformer_init());

            // flat relative-offset index for every (token, token) pair
            let mut coords = Vec::with_capacity(t as usize);
            for i in 0..wh {
                for j in 0..ww {
                    for k in 0..wd {
                        coords.push([i, j, k]);
                    }
                }
            }
            let mut index = Vec::with_capacity((t * t) as usize);
            for a in &coords {
                for b in &coords {
                    let di = a[0] - b[0] + wh - 1;
                    let dj = a[1] - b[1] + ww - 1;
                    let dk = a[2] - b[2] + wd - 1;
                    index.push(di * (2 * ww - 1) * (2 * wd - 1) + dj * (2 * wd - 1) + dk);
                }
            }
            (table, Tensor::from_slice(&index).to_device(p.device()))
        });

        WindowAttention {
            qkv: nn::linear(p / "qkv", dim, 3 * dim, cfg),
            proj: nn::linear(p / "proj", dim, dim, cfg),
            rel_bias,
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        }
    }

    /// xs: (num_windows, tokens, dim)
    fn forward(&self, xs: &Tensor) -> Tensor {
        let (b, t, e) = xs.size3().unwrap();
        let head_dim = e / self.heads;
        let qkv = xs
            .apply(&self.qkv)
            .reshape([b, t, 3, self.heads, head_dim])
            .permute([2, 0, 3, 1, 4]);
        let (q, k, v) = (qkv.get(0), qkv.get(1), qkv.get(2));
        let mut attn = q.matmul(&k.transpose(-2, -1)) * self.scale;
        if let Some((table, index)) = &self.rel_bias {
            let bias = table
                .index_select(0, index)
                .view([t, t, self.heads])
                .permute([2, 0, 1])
                .unsqueeze(0);
            attn = attn + bias;
        }
        let attn = attn.softmax(-1, Kind::Float);
        attn.matmul(&v)
            .transpose(1, 2)
            .reshape([b, t, e])
            .apply(&self.proj)
    }
}

struct SwinBlock {
    norm1: nn::LayerNorm,
    attn: WindowAttention,
    norm2: nn::LayerNorm,
    fc1: nn::Linear,
    fc2: nn::Linear,
    window: [i64; 3],
    shift: [i64; 3],
}

impl SwinBlock {
    fn new(p: &nn::Path, dim: i64, heads: i64, window: [i64; 3], shifted: bool) -> SwinBlock {
        let cfg = nn::LinearConfig { ws_init: transformer_init(), ..Default::default() };
        let shift = if shifted { window.map(|w| w / 2) } else { [0; 3] };
        SwinBlock {
            norm1: nn::layer_norm(p / "norm1", vec![dim], Default::default()),
            attn: WindowAttention::new(&(p / "attn"), dim, heads, window),
            norm2: nn::layer_norm(p / "norm2", vec![dim], Default::default()),
            fc1: nn::linear(p / "fc1", dim, MLP_RATIO * dim, cfg),
            fc2: nn::linear(p / "fc2", MLP_RATIO * dim, dim, cfg),
            window,
            shift,
        }
    }

    /// xs: (N, h, w, d, C) token grid.
    fn forward(&self, xs: &Tensor) -> Tensor {
        let size = xs.size();
        let [n, h, w, d, c]: [i64; 5] = size.try_into().unwrap();
        let [wh, ww, wd] = self.window;

        let mut shifted = xs.apply(&self.norm1);
        if self.shift.iter().any(|&s| s > 0) {
            shifted = shifted.roll([-self.shift[0], -self.shift[1], -self.shift[2]], [1, 2, 3]);
        }
        let windows = shifted
            .view([n, h / wh, wh, w / ww, ww, d / wd, wd, c].as_slice())
            .permute([0, 1, 3, 5, 2, 4, 6, 7])
            .reshape([-1, wh * ww * wd, c]);
        let attended = self.attn.forward(&windows);
        let mut merged = attended
            .view([n, h / wh, w / ww, d / wd, wh, ww, wd, c].as_slice())
            .permute([0, 1, 4, 2, 5, 3, 6, 7])
            .reshape([n, h, w, d, c]);
        if self.shift.iter().any(|&s| s > 0) {
            merged = merged.roll([self.shift[0], self.shift[1], self.shift[2]], [1, 2, 3]);
        }
        let xs = xs + merged;
        let mlp = xs.apply(&self.norm2).apply(&self.fc1).gelu("none").apply(&self.fc2);
        xs + mlp
    }
}

struct PatchMerging {
    norm: nn::LayerNorm,
    reduce: nn::Linear,
}

impl PatchMerging {
    fn new(p: &nn::Path, dim: i64) -> PatchMerging {
        PatchMerging {
            norm: nn::layer_norm(p / "norm", vec![8 * dim], Default::default()),
            reduce: nn::linear(
                p / "reduce",
                8 * dim,
                2 * dim,
                nn::LinearConfig { ws_init: transformer_init(), bias: false, ..Default::default() },
            ),
        }
    }

    /// Halve each spatial dim, concatenating the 2x2x2 neighborhood.
    fn forward(&self, xs: &Tensor) -> Tensor {
        let size = xs.size();
        let [n, h, w, d, c]: [i64; 5] = size.try_into().unwrap();
        xs.view([n, h / 2, 2, w / 2, 2, d / 2, 2, c].as_slice())
            .permute([0, 1, 3, 5, 2, 4, 6, 7])
            .reshape([n, h / 2, w / 2, d / 2, 8 * c])
            .apply(&self.norm)
            .apply(&self.reduce)
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerging>,
}

/// The Swin trunk; `head` is present only in standalone mode.
pub struct Swin3d {
    patch_conv: nn::Conv3D,
    patch_norm: nn::LayerNorm,
    stages: Vec<Stage>,
    final_norm: nn::LayerNorm,
    head: Option<nn::Linear>,
    embed_dim: i64,
}

impl Swin3d {
    pub fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<Swin3d> {
        cfg.validate()?;
        let standalone = cfg.arch == super::Arch::Swin;
        let (h, w, d) = cfg.input_shape;
        // patch embed /4 then three /2 patch mergings
        for (name, dim) in [("height", h), ("width", w), ("depth", d)] {
            if dim % 32 != 0 {
                return Err(Error::Config(format!(
                    "swin input {name} {dim} must be divisible by 32"
                )));
            }
        }
        let embed = cfg.scaled(BASE_EMBED);
        for (s, &heads) in HEADS.iter().enumerate() {
            let dim = embed << s;
            if dim % heads != 0 {
                return Err(Error::Config(format!(
                    "swin stage {s} dim {dim} not divisible by {heads} heads at this width"
                )));
            }
        }

        let patch_conv = nn::conv3d(
            p / "patch_conv",
            cfg.in_channels,
            embed,
            PATCH,
            nn::ConvConfig { stride: PATCH, ..Default::default() },
        );
        let patch_norm = nn::layer_norm(p / "patch_norm", vec![embed], Default::default());

        let mut grid = [h / PATCH, w / PATCH, d / PATCH];
        let mut stages = Vec::new();
        for s in 0..DEPTHS.len() {
            let dim = embed << s;
            let window = window_dims(grid);
            let sp = p / "stage" / (s as i64);
            let blocks = (0..DEPTHS[s])
                .map(|b| SwinBlock::new(&(&sp / "block" / b), dim, HEADS[s], window, b % 2 == 1))
                .collect();
            let merge = (s + 1 < DEPTHS.len()).then(|| {
                grid = grid.map(|g| g / 2);
                PatchMerging::new(&(&sp / "merge"), dim)
            });
            stages.push(Stage { blocks, merge });
        }

        let embed_dim = embed << (DEPTHS.len() - 1);
        let final_norm = nn::layer_norm(p / "final_norm", vec![embed_dim], Default::default());
        let head =
            standalone.then(|| nn::linear(p / "head", embed_dim, cfg.num_classes, Default::default()));
        Ok(Swin3d { patch_conv, patch_norm, stages, final_norm, head, embed_dim })
    }

    pub fn embed_dim(&self) -> i64 {
        self.embed_dim
    }

    /// Mean-pooled final-stage embedding, shape (N, embed_dim).
    pub fn embed_t(&self, xs: &Tensor, _train: bool) -> Tensor {
        // (N, C, h, w, d) -> token grid (N, h, w, d, C)
        let mut tokens = xs
            .apply(&self.patch_conv)
            .permute([0, 2, 3, 4, 1])
            .apply(&self.patch_norm);
        for stage in &self.stages {
            for block in &stage.blocks {
                tokens = block.forward(&tokens);
            }
            if let Some(merge) = &stage.merge {
                tokens = merge.forward(&tokens);
            }
        }
        tokens.apply(&self.final_norm).mean_dim([1, 2, 3].as_slice(), false, Kind::Float)
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let embed = self.embed_t(xs, train);
        embed.apply(self.head.as_ref().expect("standalone Swin has a head"))
    }
}
