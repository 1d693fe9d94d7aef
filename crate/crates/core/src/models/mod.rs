//! The six 3D classification architectures, centered on the hybrid
//! DenseNet121-ViT: a DenseNet branch producing a 128-D embedding and a ViT
//! branch producing a 768-D embedding, concatenated to 896-D and classified
//! by a small MLP with dropout.
//!
//! A `width_multiplier` scales every channel/embedding width for desk-scale
//! tests without changing topology; at 1.0 the embedding dims are exactly
//! 128/768/896.

mod densenet;
mod efficientnet;
mod resnet;
mod swin;
mod vit;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::nn;
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

pub use densenet::DenseNet3d;
pub use efficientnet::EfficientNet3d;
pub use resnet::{load_resnet_pretrained, ResNet3d};
pub use swin::Swin3d;
pub use vit::Vit3d;

/// ViT patch edge length; volumes are cut into cubes of this size.
pub const PATCH_SIZE: i64 = 16;

/// The architectures of the comparison study plus a standalone ViT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Densenet121Vit,
    Densenet121,
    Vit,
    Resnet18,
    Resnet18Swin,
    Swin,
    EfficientnetB0,
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::Densenet121Vit,
        Arch::Densenet121,
        Arch::Vit,
        Arch::Resnet18,
        Arch::Resnet18Swin,
        Arch::Swin,
        Arch::EfficientnetB0,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Densenet121Vit => "densenet121_vit",
            Arch::Densenet121 => "densenet121",
            Arch::Vit => "vit",
            Arch::Resnet18 => "resnet18",
            Arch::Resnet18Swin => "resnet18_swin",
            Arch::Swin => "swin",
            Arch::EfficientnetB0 => "efficientnet_b0",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }

    fn uses_vit_patches(&self) -> bool {
        matches!(self, Arch::Densenet121Vit | Arch::Vit)
    }

    /// Tuned per-architecture dropout (0.5 for the hybrid, 0.1 for ResNet18);
    /// comparison models without a tuned value use 0.1.
    pub fn default_dropout(&self) -> f64 {
        match self {
            Arch::Densenet121Vit => 0.5,
            _ => 0.1,
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to rebuild a model, persisted next to checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_channels: i64,
    pub num_classes: i64,
    pub input_shape: (i64, i64, i64),
    pub dropout: f64,
    pub width_multiplier: f64,
    pub pretrained_path: Option<PathBuf>,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            in_channels: 1,
            num_classes: 2,
            input_shape: (128, 128, 64),
            dropout: arch.default_dropout(),
            width_multiplier: 1.0,
            pretrained_path: None,
        }
    }

    pub fn with_input_shape(mut self, shape: (i64, i64, i64)) -> ModelConfig {
        self.input_shape = shape;
        self
    }

    pub fn with_width_multiplier(mut self, wm: f64) -> ModelConfig {
        self.width_multiplier = wm;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> ModelConfig {
        self.dropout = dropout;
        self
    }

    pub fn with_pretrained(mut self, path: impl Into<PathBuf>) -> ModelConfig {
        self.pretrained_path = Some(path.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1], got {}", self.dropout)));
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.in_channels < 1 || self.num_classes < 2 {
            return Err(Error::Config("need in_channels >= 1 and num_classes >= 2".into()));
        }
        let (h, w, d) = self.input_shape;
        if h < 1 || w < 1 || d < 1 {
            return Err(Error::Config("input shape dims must be positive".into()));
        }
        if self.arch.uses_vit_patches()
            && (h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 || d % PATCH_SIZE != 0)
        {
            return Err(Error::Config(format!(
                "input shape {h}x{w}x{d} not divisible by patch size {PATCH_SIZE}"
            )));
        }
        Ok(())
    }

    /// Scale a base width, never below 1.
    pub(crate) fn scaled(&self, base: i64) -> i64 {
        ((base as f64 * self.width_multiplier).round() as i64).max(1)
    }
}

/// The two branch embeddings of a hybrid model and their concatenation.
pub struct HybridEmbeddings {
    pub cnn_embed: Tensor,
    pub vit_embed: Tensor,
    pub fused: Tensor,
}

/// Concat-fusion classifier shared by both hybrids:
/// fused -> hidden (ReLU) -> dropout -> logits.
pub struct FusionHead {
    fc1: nn::Linear,
    fc2: nn::Linear,
    dropout: f64,
}

impl FusionHead {
    pub fn new(p: &nn::Path, in_dim: i64, hidden: i64, classes: i64, dropout: f64) -> FusionHead {
        FusionHead {
            fc1: nn::linear(p / "fc1", in_dim, hidden, Default::default()),
            fc2: nn::linear(p / "fc2", hidden, classes, Default::default()),
            dropout,
        }
    }

    pub fn forward_t(&self, fused: &Tensor, train: bool) -> Tensor {
        fused
            .apply(&self.fc1)
            .relu()
            .dropout(self.dropout, train)
            .apply(&self.fc2)
    }
}

/// DenseNet121 and ViT branches over the same volume, fused at 896-D.
pub struct HybridDenseNetVit {
    cnn: DenseNet3d,
    vit: Vit3d,
    head: FusionHead,
}

impl HybridDenseNetVit {
    fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<HybridDenseNetVit> {
        let cnn = DenseNet3d::new(&(p / "densenet"), cfg)?;
        let vit = Vit3d::new(&(p / "vit"), cfg)?;
        let fused_dim = cnn.embed_dim() + vit.embed_dim();
        let head = FusionHead::new(&(p / "head"), fused_dim, cfg.scaled(256), cfg.num_classes, cfg.dropout);
        Ok(HybridDenseNetVit { cnn, vit, head })
    }

    fn embeddings(&self, xs: &Tensor, train: bool) -> HybridEmbeddings {
        let cnn_embed = self.cnn.embed_t(xs, train);
        let vit_embed = self.vit.embed_t(xs, train);
        let fused = Tensor::cat(&[&cnn_embed, &vit_embed], 1);
        HybridEmbeddings { cnn_embed, vit_embed, fused }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let emb = self.embeddings(xs, train);
        self.head.forward_t(&emb.fused, train)
    }
}

/// ResNet18 and Swin branches fused by the same concat+MLP pattern.
pub struct HybridResNetSwin {
    cnn: ResNet3d,
    swin: Swin3d,
    head: FusionHead,
}

impl HybridResNetSwin {
    fn new(p: &nn::Path, cfg: &ModelConfig) -> Result<HybridResNetSwin> {
        let cnn = ResNet3d::new(&(p / "resnet"), cfg, true)?;
        let swin = Swin3d::new(&(p / "swin"), cfg)?;
        let fused_dim = cnn.embed_dim() + swin.embed_dim();
        let head = FusionHead::new(&(p / "head"), fused_dim, cfg.scaled(256), cfg.num_classes, cfg.dropout);
        Ok(HybridResNetSwin { cnn, swin, head })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let cnn_embed = self.cnn.embed_t(xs, train);
        let swin_embed = self.swin.embed_t(xs, train);
        let fused = Tensor::cat(&[&cnn_embed, &swin_embed], 1);
        self.head.forward_t(&fused, train)
    }
}

enum Net {
    DenseNetVit(HybridDenseNetVit),
    DenseNet(DenseNet3d),
    Vit(Vit3d),
    ResNet(ResNet3d),
    ResNetSwin(HybridResNetSwin),
    Swin(Swin3d),
    EfficientNet(EfficientNet3d),
}

/// A constructed model: its weights, the config that built it, and the
/// architecture graph.
pub struct Model {
    pub config: ModelConfig,
    pub vs: nn::VarStore,
    net: Net,
}

/// Build a model on `device`, seeding weight initialization.
pub fn build_model(config: &ModelConfig, device: Device, seed: u64) -> Result<Model> {
    config.validate()?;
    tch::manual_seed(seed as i64);
    let vs = nn::VarStore::new(device);
    let root = vs.root();
    let net = match config.arch {
        Arch::Densenet121Vit => Net::DenseNetVit(HybridDenseNetVit::new(&root, config)?),
        Arch::Densenet121 => Net::DenseNet(DenseNet3d::new(&root, config)?),
        Arch::Vit => Net::Vit(Vit3d::new(&root, config)?),
        Arch::Resnet18 => Net::ResNet(ResNet3d::new(&root, config, false)?),
        Arch::Resnet18Swin => Net::ResNetSwin(HybridResNetSwin::new(&root, config)?),
        Arch::Swin => Net::Swin(Swin3d::new(&root, config)?),
        Arch::EfficientnetB0 => Net::EfficientNet(EfficientNet3d::new(&root, config)?),
    };
    let model = Model { config: config.clone(), vs, net };
    if let Some(path) = &model.config.pretrained_path {
        match &model.net {
            Net::ResNet(_) => {
                load_resnet_pretrained(&model.vs, path)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "pretrained weights are only supported for resnet18, not {}",
                    model.config.arch
                )))
            }
        }
    }
    Ok(model)
}

impl Model {
    /// Logits of shape (N, num_classes) from input (N, C, H, W, D).
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        match &self.net {
            Net::DenseNetVit(m) => m.forward_t(xs, train),
            Net::DenseNet(m) => m.forward_t(xs, train),
            Net::Vit(m) => m.forward_t(xs, train),
            Net::ResNet(m) => m.forward_t(xs, train),
            Net::ResNetSwin(m) => m.forward_t(xs, train),
            Net::Swin(m) => m.forward_t(xs, train),
            Net::EfficientNet(m) => m.forward_t(xs, train),
        }
    }

    /// Branch embeddings, only available on the DenseNet121-ViT hybrid.
    pub fn hybrid_embeddings(&self, xs: &Tensor) -> Option<HybridEmbeddings> {
        match &self.net {
            Net::DenseNetVit(m) => Some(tch::no_grad(|| m.embeddings(xs, false))),
            _ => None,
        }
    }

    /// Eval-mode softmax probabilities, shape (N, num_classes).
    pub fn predict_proba(&self, xs: &Tensor) -> Tensor {
        tch::no_grad(|| self.forward_t(xs, false).softmax(1, Kind::Float))
    }

    pub fn count_parameters(&self) -> i64 {
        count_parameters(&self.vs)
    }

    /// Save weights to `path` and the config to `<path>.json`.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.vs.save(path)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Format(format!("serializing model config: {e}")))?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Rebuild a model from a checkpoint and its `<path>.json` config sidecar.
pub fn load_checkpoint(path: impl AsRef<Path>, device: Device) -> Result<Model> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let json = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut config: ModelConfig = serde_json::from_str(&json)
        .map_err(|e| Error::Format(format!("parsing {}: {e}", sidecar.display())))?;
    // weights come from the checkpoint, not from the original pretrained file
    config.pretrained_path = None;
    let mut model = build_model(&config, device, 0)?;
    model.vs.load(path)?;
    Ok(model)
}

/// Total trainable scalar parameters in a var store. Frozen tensors and
/// batch-norm running statistics are excluded.
pub fn count_parameters(vs: &nn::VarStore) -> i64 {
    vs.trainable_variables()
        .iter()
        .filter(|t| t.requires_grad())
        .map(|t| t.numel() as i64)
        .sum()
}

/// Cut a volume batch (N, C, H, W, D) into non-overlapping cubic patches,
/// flattened to rows of `C * PATCH_SIZE^3`: output (N, tokens, patch_dim).
pub fn patchify(xs: &Tensor) -> Result<Tensor> {
    let size = xs.size();
    let [n, c, h, w, d]: [i64; 5] = size
        .clone()
        .try_into()
        .map_err(|_| Error::Config(format!("patchify expects a 5-D batch, got shape {size:?}")))?;
    let p = PATCH_SIZE;
    if h % p != 0 || w % p != 0 || d % p != 0 {
        return Err(Error::Config(format!(
            "volume {h}x{w}x{d} not divisible by patch size {p}"
        )));
    }
    let (nh, nw, nd) = (h / p, w / p, d / p);
    Ok(xs
        .view([n, c, nh, p, nw, p, nd, p].as_slice())
        .permute([0, 2, 4, 6, 1, 3, 5, 7])
        .reshape([n, nh * nw * nd, c * p * p * p]))
}

/// Init used for transformer weights: normal(0, 0.02), the customary
/// transformer initialization scale.
pub(crate) fn transformer_init() -> nn::Init {
    nn::Init::Randn { mean: 0.0, stdev: 0.02 }
}
