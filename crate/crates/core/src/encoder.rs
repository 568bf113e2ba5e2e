//! Four-stage hierarchical transformer encoder (Mix Transformer). Each stage
//! embeds overlapping patches with a strided convolution, runs a stack of
//! pre-norm blocks (efficient self-attention + Mix-FFN) and normalizes the
//! result. No positional encoding is used; the depthwise convolution inside
//! Mix-FFN supplies location information, so any input whose sides are
//! multiples of 32 is accepted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Bound, Conv2d, LayerNorm, Linear, ParamBuilder};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{Element, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_pad: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub reduction_ratio: usize,
    pub mlp_ratio: usize,
}

impl StageConfig {
    /// Patch geometry of stage `index` (0-based): 7/4/3 for the first
    /// stage, 3/2/1 for the merging stages.
    pub fn with_geometry(index: usize, embed_dim: usize, depth: usize, heads: usize, reduction_ratio: usize) -> Self {
        let (patch_kernel, patch_stride, patch_pad) = if index == 0 { (7, 4, 3) } else { (3, 2, 1) };
        Self {
            patch_kernel,
            patch_stride,
            patch_pad,
            embed_dim,
            depth,
            heads,
            reduction_ratio,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn validate(&self, index: usize) -> Result<()> {
        let field = |f: &str| format!("encoder.stages[{index}].{f}");
        if self.embed_dim == 0 {
            return Err(Error::config(field("embed_dim"), "must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                field("heads"),
                format!("{} heads do not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::config(field("reduction_ratio"), "must be at least 1"));
        }
        let expected = if index == 0 { (7, 4, 3) } else { (3, 2, 1) };
        if (self.patch_kernel, self.patch_stride, self.patch_pad) != expected {
            return Err(Error::config(
                field("patch_kernel"),
                format!(
                    "stage {} patch geometry must be kernel/stride/pad {:?}",
                    index + 1,
                    expected
                ),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(field("mlp_ratio"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: [StageConfig; 4],
    pub norm_eps: f64,
}

impl EncoderConfig {
    /// MiT-B0 widths: dims (32, 64, 160, 256), depth 2 everywhere, heads
    /// (1, 2, 5, 8), reduction ratios (8, 4, 2, 1), MLP ratio 4.
    pub fn b0() -> Self {
        Self::from_dims([32, 64, 160, 256], [2, 2, 2, 2], [1, 2, 5, 8], [8, 4, 2, 1])
    }

    pub fn from_dims(dims: [usize; 4], depths: [usize; 4], heads: [usize; 4], ratios: [usize; 4]) -> Self {
        Self {
            in_channels: 3,
            stages: std::array::from_fn(|i| StageConfig::with_geometry(i, dims[i], depths[i], heads[i], ratios[i])),
            norm_eps: 1e-6,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stages[i].embed_dim)
    }

    /// Total downsampling of the input by the end of the last stage.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("encoder.in_channels", "must be positive"));
        }
        self.stages.iter().enumerate().try_for_each(|(i, s)| s.validate(i))
    }
}

/// A `(H·W)×C` token matrix together with its spatial grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

/// Encoder outputs F1..F4 as `C_i×H_i×W_i` maps.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub maps: [Var; 4],
}

/// Strided-conv patch embedding followed by layer normalization.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl OverlapPatchEmbed {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, in_channels: usize, stage: &StageConfig, eps: f64) -> Result<Self> {
        let spec = ConvSpec::new(stage.patch_stride, stage.patch_pad, 1);
        Ok(Self {
            proj: Conv2d::new(b, "proj", in_channels, stage.embed_dim, stage.patch_kernel, spec, true)?,
            norm: LayerNorm::new(b, "norm", stage.embed_dim, eps),
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<TokenGrid> {
        let map = self.proj.forward(tape, p, x)?;
        let (h, w) = (tape.shape(map)[1], tape.shape(map)[2]);
        let tokens = map_to_tokens(tape, map)?;
        let tokens = self.norm.forward(tape, p, tokens)?;
        Ok(TokenGrid { tokens, h, w })
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }
}

/// Result of an attention pass; `weights` holds the `heads×n×m` softmax
/// matrix for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention whose keys and values come from
/// a token grid shrunk by a `ratio×ratio` strided convolution.
#[derive(Debug, Clone)]
pub struct EfficientSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub reduction: Option<(Conv2d, LayerNorm)>,
    pub dim: usize,
    pub heads: usize,
    pub ratio: usize,
}

impl EfficientSelfAttention {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, ratio: usize, eps: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("heads", format!("{heads} heads do not divide {dim} channels")));
        }
        if ratio == 0 {
            return Err(Error::config("reduction_ratio", "must be at least 1"));
        }
        let reduction = if ratio > 1 {
            let spec = ConvSpec::new(ratio, 0, 1);
            Some((
                Conv2d::new(b, "sr", dim, dim, ratio, spec, true)?,
                LayerNorm::new(b, "sr_norm", dim, eps),
            ))
        } else {
            None
        };
        Ok(Self {
            query: Linear::new(b, "q", dim, dim),
            key: Linear::new(b, "k", dim, dim),
            value: Linear::new(b, "v", dim, dim),
            proj: Linear::new(b, "proj", dim, dim),
            reduction,
            dim,
            heads,
            ratio,
        })
    }

    /// `n×C` tokens to `heads×n×d`.
    fn split_heads<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let r = tape.reshape(x, &[n, self.heads, self.dim / self.heads])?;
        tape.permute(r, &[1, 0, 2])
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: TokenGrid) -> Result<AttentionOutput> {
        let n = x.h * x.w;
        let q = self.query.forward(tape, p, x.tokens)?;
        let q = self.split_heads(tape, q)?;

        let kv_src = match &self.reduction {
            Some((conv, norm)) => {
                let map = tokens_to_map(tape, x.tokens, x.h, x.w)?;
                let reduced = conv.forward(tape, p, map)?;
                let tokens = map_to_tokens(tape, reduced)?;
                norm.forward(tape, p, tokens)?
            }
            None => x.tokens,
        };
        let k = self.key.forward(tape, p, kv_src)?;
        let k = self.split_heads(tape, k)?;
        let v = self.value.forward(tape, p, kv_src)?;
        let v = self.split_heads(tape, v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let head_dim = (self.dim / self.heads) as f64;
        let scores = tape.scale(scores, 1.0 / head_dim.sqrt())?;
        let weights = tape.softmax_lastdim(scores)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[n, self.dim])?;
        let out = self.proj.forward(tape, p, ctx)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn num_params(&self) -> usize {
        let reduction = self
            .reduction
            .as_ref()
            .map_or(0, |(c, n)| c.num_params() + n.num_params());
        4 * self.query.num_params() + reduction
    }
}

/// Feed-forward block with a 3×3 depthwise convolution between the two
/// token-wise maps.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, dim: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(Self {
            fc1: Linear::new(b, "fc1", dim, hidden),
            dwconv: Conv2d::new(b, "dwconv", hidden, hidden, 3, ConvSpec::new(1, 1, hidden), true)?,
            fc2: Linear::new(b, "fc2", hidden, dim),
        })
    }

    /// The residual-free branch: expand → depthwise conv → GELU → project.
    pub fn branch<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: TokenGrid) -> Result<Var> {
        let hidden = self.fc1.forward(tape, p, x.tokens)?;
        let map = tokens_to_map(tape, hidden, x.h, x.w)?;
        let map = self.dwconv.forward(tape, p, map)?;
        let map = tape.gelu(map)?;
        let hidden = map_to_tokens(tape, map)?;
        self.fc2.forward(tape, p, hidden)
    }

    /// `x + branch(x)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: TokenGrid) -> Result<Var> {
        let y = self.branch(tape, p, x)?;
        tape.add(x.tokens, y)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.dwconv.num_params() + self.fc2.num_params()
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, stage: &StageConfig, eps: f64) -> Result<Self> {
        let dim = stage.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(b, "norm1", dim, eps),
            attn: EfficientSelfAttention::new(&mut b.sub("attn"), dim, stage.heads, stage.reduction_ratio, eps)?,
            norm2: LayerNorm::new(b, "norm2", dim, eps),
            ffn: MixFfn::new(&mut b.sub("ffn"), dim, stage.mlp_ratio)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: TokenGrid) -> Result<TokenGrid> {
        let normed = self.norm1.forward(tape, p, x.tokens)?;
        let attn = self.attn.forward(tape, p, TokenGrid { tokens: normed, ..x })?;
        let x1 = tape.add(x.tokens, attn.out)?;
        let normed = self.norm2.forward(tape, p, x1)?;
        let ffn = self.ffn.branch(tape, p, TokenGrid { tokens: normed, ..x })?;
        let tokens = tape.add(x1, ffn)?;
        Ok(TokenGrid { tokens, ..x })
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params() + self.attn.num_params() + self.norm2.num_params() + self.ffn.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: OverlapPatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Stage {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut grid = self.embed.forward(tape, p, x)?;
        for block in &self.blocks {
            grid = block.forward(tape, p, grid)?;
        }
        let tokens = self.norm.forward(tape, p, grid.tokens)?;
        tokens_to_map(tape, tokens, grid.h, grid.w)
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params() + self.blocks.iter().map(Block::num_params).sum::<usize>() + self.norm.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut in_channels = cfg.in_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, sc) in cfg.stages.iter().enumerate() {
            let mut sb = b.sub(&format!("stage{}", i + 1));
            let embed = OverlapPatchEmbed::new(&mut sb.sub("patch_embed"), in_channels, sc, cfg.norm_eps)?;
            let blocks = (0..sc.depth)
                .map(|d| Block::new(&mut sb.sub(&format!("block{d}")), sc, cfg.norm_eps))
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(&mut sb, "norm", sc.embed_dim, cfg.norm_eps);
            stages.push(Stage { embed, blocks, norm });
            in_channels = sc.embed_dim;
        }
        Ok(Self {
            stages,
            config: cfg.clone(),
        })
    }

    /// Runs all four stages on a `C×H×W` image. Both sides must be
    /// multiples of the total stride (32 for the standard geometry).
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<StageFeatures> {
        let s = tape.shape(image).to_vec();
        let stride = self.config.total_stride();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::dim(format!(
                "encoder expects {}×H×W input, got {s:?}",
                self.config.in_channels
            )));
        }
        if s[1] % stride != 0 || s[2] % stride != 0 {
            return Err(Error::dim(format!(
                "input {}×{} is not divisible by {stride}; pad before encoding",
                s[1], s[2]
            )));
        }
        let mut x = image;
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(tape, p, x)?;
            maps.push(x);
        }
        Ok(StageFeatures {
            maps: maps.try_into().expect("four stages"),
        })
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(Stage::num_params).sum()
    }
}
