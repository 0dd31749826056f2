//! Plain pre-norm ViT encoder, optionally customized with one extra
//! transformer block and one extra feedforward layer before the head.

mod checkpoint;
mod forward;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{bind, images_to_batch, patchify, Bound, ForwardTrace};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::tensor::{Scalar, Tensor};

/// Images always carry three channels.
pub const IN_CHANNELS: usize = 3;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Initialization of linear-layer weight matrices. Class token and
/// positional embeddings always use a truncated normal with [`INIT_STD`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Truncated normal with a fixed standard deviation.
    TruncatedNormal { std: f64 },
    /// Truncated normal with standard deviation `1 / sqrt(fan_in)`, which
    /// keeps activations from shrinking layer by layer in narrow models.
    FanIn,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::TruncatedNormal { std: INIT_STD }
    }
}

impl WeightInit {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::TruncatedNormal { std } => std,
            WeightInit::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Base number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Adds one transformer block and one `embed_dim -> embed_dim` GELU
    /// layer between the final norm and the head.
    pub customized: bool,
    pub dropout: f64,
    pub weight_init: WeightInit,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            depth: 4,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 3,
            customized: true,
            dropout: 0.0,
            weight_init: WeightInit::default(),
        }
    }
}

impl ViTConfig {
    /// CPU-trainable configuration for 64x64 inputs.
    pub fn desk() -> Self {
        Self { image_size: 64, patch_size: 8, embed_dim: 64, depth: 2, heads: 4, ..Self::default() }
    }

    /// Smallest useful configuration, sized for finite-difference checks.
    pub fn tiny() -> Self {
        Self { image_size: 8, patch_size: 4, embed_dim: 8, depth: 1, heads: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "model.image_size",
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "model.embed_dim",
                format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("rate {} outside [0, 1)", self.dropout)));
        }
        if let WeightInit::TruncatedNormal { std } = self.weight_init {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::config("model.weight_init.std", format!("must be positive, got {std}")));
            }
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per image: the class token plus one per patch.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Total transformer blocks.
    pub fn num_blocks(&self) -> usize {
        self.depth + usize::from(self.customized)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IN_CHANNELS
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Role of a parameter tensor, used to decide initialization and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear-layer weight matrix, stored `[in, out]`.
    Weight,
    Bias,
    NormGain,
    NormBias,
    /// Class token or positional embedding.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.0.push(ParamSpec { name, shape, kind });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.weight"), vec![fan_in, fan_out], ParamKind::Weight);
        self.push(format!("{prefix}.bias"), vec![fan_out], ParamKind::Bias);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.gamma"), vec![dim], ParamKind::NormGain);
        self.push(format!("{prefix}.beta"), vec![dim], ParamKind::NormBias);
    }
}

/// Every parameter tensor of the model, in canonical order.
pub fn param_specs(config: &ViTConfig) -> Vec<ParamSpec> {
    let d = config.embed_dim;
    let mut s = SpecList(Vec::new());
    s.linear("patch_embed", config.patch_dim(), d);
    s.push("cls_token".into(), vec![1, d], ParamKind::Embedding);
    s.push("pos_embed".into(), vec![config.seq_len(), d], ParamKind::Embedding);
    for b in 0..config.num_blocks() {
        s.norm(&format!("blocks.{b}.norm1"), d);
        s.linear(&format!("blocks.{b}.attn.qkv"), d, 3 * d);
        s.linear(&format!("blocks.{b}.attn.proj"), d, d);
        s.norm(&format!("blocks.{b}.norm2"), d);
        s.linear(&format!("blocks.{b}.mlp.fc1"), d, config.mlp_hidden());
        s.linear(&format!("blocks.{b}.mlp.fc2"), config.mlp_hidden(), d);
    }
    s.norm("norm", d);
    if config.customized {
        s.linear("extra_ffn", d, d);
    }
    s.linear("head", d, config.num_classes);
    s.0
}

/// Parameters of one transformer block.
pub fn block_parameter_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let m = config.mlp_hidden();
    4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d)
}

/// Closed-form parameter count.
pub fn parameter_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let k = config.num_classes;
    let embed = config.patch_dim() * d + d + d + config.seq_len() * d;
    let extra = if config.customized { d * d + d } else { 0 };
    embed + config.num_blocks() * block_parameter_count(config) + 2 * d + extra + d * k + k
}

/// Learned parameters of a model, stored in [`param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: ViTConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps tensors, checking them against the config's layout.
    pub fn from_tensors(config: ViTConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Dimension(format!("expected {} parameter tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Dimension(format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(Self { config, specs, tensors })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.tensors[i])
    }

    /// Allocated element total.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { config: self.config.clone(), specs: self.specs.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Initializes a model: truncated-normal weights (see [`WeightInit`]) and
/// embeddings, zero biases and norm shifts, unit norm gains.
pub fn build_model(config: &ViTConfig, init_seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let specs = param_specs(config);
    let tensors = specs
        .iter()
        .enumerate()
        .map(|(i, s)| match s.kind {
            ParamKind::Weight | ParamKind::Embedding => {
                let std = match s.kind {
                    ParamKind::Weight => config.weight_init.std(s.shape[0]),
                    _ => INIT_STD,
                };
                let mut rng = seed::rng(init_seed, &[tag::INIT, i as u64]);
                Tensor::from_fn(&s.shape, |_| truncated_normal(&mut rng, std) as f32)
            }
            ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(&s.shape),
            ParamKind::NormGain => Tensor::full(&s.shape, 1.0),
        })
        .collect();
    ModelParams::from_tensors(config.clone(), tensors)
}
