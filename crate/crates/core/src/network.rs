//! The assembled network: configuration, construction, inference and
//! parameter / multiply-accumulate accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, NmfMode, StageSet};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamBuilder, ParamStore};
use crate::tensor::kernels::{self, softmax_lastdim};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
    pub ignore_index: u8,
    /// Per-channel mean subtracted from 0–255 inputs.
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ModelConfig {
    /// B0 encoder, 4-stage Light-Ham decoder with 256 channels, 11 classes.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::b0(),
            decoder: DecoderConfig::default(),
            num_classes: 11,
            ignore_index: DEFAULT_IGNORE_INDEX,
            norm_mean: [123.675, 116.28, 103.53],
            norm_std: [58.395, 57.12, 57.375],
        }
    }
}

impl ModelConfig {
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_ham_channels(mut self, channels: usize) -> Self {
        self.decoder.ham_channels = channels;
        self
    }

    pub fn with_stages(mut self, stages: StageSet) -> Self {
        self.decoder.input_stages = stages;
        self
    }

    /// A desk-scale variant for tests and quick experiments: stage widths
    /// 8/16/24/32 with one block each and a 32-channel decoder.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::from_dims([8, 16, 24, 32], [1; 4], [1, 2, 3, 4], [8, 4, 2, 1]),
            decoder: DecoderConfig {
                ham_channels: 32,
                norm_groups: 8,
                nmf_rank: 8,
                ..DecoderConfig::default()
            },
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        if self.num_classes > usize::from(self.ignore_index) {
            return Err(Error::config(
                "num_classes",
                format!("{} classes collide with ignore index {}", self.num_classes, self.ignore_index),
            ));
        }
        if self.norm_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::config("norm_std", "must be positive"));
        }
        Ok(())
    }

    /// Canonical JSON text (field order fixed by the struct definition).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter-free structure of the network; values live in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gasformer {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// A built network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub net: Gasformer,
    pub params: ParamStore<T>,
}

/// Logits of a forward pass plus the tape handles of every parameter.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub params: Bound,
}

/// Output of [`Model::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    /// Row-major class index per pixel.
    pub labels: Vec<u8>,
    /// `K×H×W` class probabilities, when requested.
    pub probabilities: Option<Tensor<f32>>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model; identical seeds give bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), &config.encoder)?;
        let decoder = Decoder::new(
            &mut b.sub("decoder"),
            &config.decoder,
            config.encoder.dims(),
            config.num_classes,
        )?;
        Ok(Self {
            config: config.clone(),
            net: Gasformer { encoder, decoder },
            params,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Records a forward pass of a normalized `3×H×W` image (sides divisible
    /// by 32) and returns logits on the decoder grid.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>, mode: NmfMode) -> Result<ForwardPass> {
        let params = self.params.bind(tape)?;
        let x = tape.constant(image.clone())?;
        let features = self.net.encoder.encode(tape, &params, x)?;
        let logits = self.net.decoder.decode(tape, &params, &features, mode)?;
        Ok(ForwardPass { logits, params })
    }

    /// Per-pixel cross-entropy of the logits upsampled to the mask size.
    pub fn loss(&self, tape: &mut Tape<T>, image: &Tensor<T>, mask: &[u8], mode: NmfMode) -> Result<(Var, ForwardPass)> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let pass = self.forward(tape, image, mode)?;
        let up = tape.bilinear_resize(pass.logits, h, w)?;
        let (loss, _) = tape.cross_entropy(up, mask, self.config.ignore_index)?;
        Ok((loss, pass))
    }

    /// Converts a 0–255 `3×H×W` image to network input.
    pub fn normalize_image(&self, raw: &Tensor<f32>) -> Result<Tensor<T>> {
        normalize_image(raw, &self.config.norm_mean, &self.config.norm_std)
    }

    /// Full-image inference on a normalized `3×H×W` image of any size. The
    /// image is zero-padded to the next multiple of 32, logits are resized
    /// to the padded canvas and cropped back.
    pub fn infer(&self, image: &Tensor<T>, with_probabilities: bool) -> Result<Prediction> {
        if image.rank() != 3 || image.shape()[0] != self.config.encoder.in_channels {
            return Err(Error::dim(format!("infer expects 3×H×W, got {:?}", image.shape())));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let stride = self.config.encoder.total_stride();
        let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
        let padded = pad_bottom_right(image, ph, pw);
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &padded, NmfMode::Eval)?;
        let logits = kernels::bilinear_resize(tape.value(pass.logits), ph, pw)?;
        let logits = crop_top_left(&logits, h, w);
        let k = logits.shape()[0];
        let plane = h * w;
        let data = logits.data();
        let labels = (0..plane)
            .map(|px| {
                let mut best = 0;
                for c in 1..k {
                    if data[c * plane + px] > data[best * plane + px] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        let probabilities = with_probabilities.then(|| {
            let per_pixel = kernels::permute(&logits.cast::<f32>(), &[1, 2, 0]).expect("rank 3");
            let probs = softmax_lastdim(&per_pixel);
            kernels::permute(&probs, &[2, 0, 1]).expect("rank 3")
        });
        Ok(Prediction {
            height: h,
            width: w,
            labels,
            probabilities,
        })
    }
}

pub fn normalize_image<T: Element>(raw: &Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor<T>> {
    if raw.rank() != 3 || raw.shape()[0] != 3 {
        return Err(Error::dim(format!("expected 3×H×W image, got {:?}", raw.shape())));
    }
    let plane = raw.shape()[1] * raw.shape()[2];
    let data = raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::from_f64_lossy((f64::from(v) - mean[c]) / std[c])
        })
        .collect();
    Tensor::new(raw.shape().to_vec(), data)
}

fn pad_bottom_right<T: Element>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Tensor::zeros(vec![c, ph, pw]);
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.data_mut()[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    out
}

fn crop_top_left<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, ph, pw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&x.data()[(ch * ph + y) * pw..(ch * ph + y) * pw + w]);
        }
    }
    Tensor::new(vec![c, h, w], out).expect("crop shape")
}

/// Closed-form parameter count of a configuration, computed from layer
/// shapes alone without building the model.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let mut total = 0;
    let mut cin = cfg.encoder.in_channels;
    for s in &cfg.encoder.stages {
        let c = s.embed_dim;
        total += cin * c * s.patch_kernel * s.patch_kernel + c + 2 * c;
        let hidden = c * s.mlp_ratio;
        let reduction = if s.reduction_ratio > 1 {
            c * c * s.reduction_ratio * s.reduction_ratio + c + 2 * c
        } else {
            0
        };
        let block = 2 * c + 4 * (c * c + c) + reduction + 2 * c + (c * hidden + hidden) + (9 * hidden + hidden) + (hidden * c + c);
        total += s.depth * block + 2 * c;
        cin = c;
    }
    let ham = cfg.decoder.ham_channels;
    let concat = cfg.decoder.concat_channels(cfg.encoder.dims());
    total += concat * ham + ham;
    total += 2 * (ham * ham + ham);
    total += ham * ham + 2 * ham;
    total += ham * cfg.num_classes + cfg.num_classes;
    total
}

/// Multiply-accumulate count per named component. One MAC counts as one
/// FLOP, the convention of common model-profiling tools; normalization and
/// activation arithmetic is not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub input: [usize; 2],
    pub entries: Vec<(String, u64)>,
    pub total_macs: u64,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

pub const FLOP_CONVENTION: &str = "MACs (1 multiply-accumulate = 1 FLOP)";

/// Analytic MAC count of a forward pass at `h×w` (sides divisible by 32).
/// Includes attention products and the eval-mode NMF iterations.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let stride = cfg.encoder.total_stride();
    if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("input {h}×{w} not divisible by {stride}")));
    }
    let mut entries: Vec<(String, u64)> = Vec::new();
    let mut cin = cfg.encoder.in_channels as u64;
    let (mut gh, mut gw) = (h, w);
    let mut grids = Vec::new();
    for (i, s) in cfg.encoder.stages.iter().enumerate() {
        let name = |part: &str| format!("encoder.stage{}.{part}", i + 1);
        gh = (gh + 2 * s.patch_pad - s.patch_kernel) / s.patch_stride + 1;
        gw = (gw + 2 * s.patch_pad - s.patch_kernel) / s.patch_stride + 1;
        grids.push((gh, gw));
        let n = (gh * gw) as u64;
        let c = s.embed_dim as u64;
        let k = s.patch_kernel as u64;
        entries.push((name("patch_embed"), cin * c * k * k * n));
        let r = s.reduction_ratio;
        let m = ((gh / r) * (gw / r)) as u64;
        let hidden = c * s.mlp_ratio as u64;
        let depth = s.depth as u64;
        let sr = if r > 1 { c * c * (r * r) as u64 * m } else { 0 };
        entries.push((name("attn.projections"), depth * (2 * c * c * n + 2 * c * c * m)));
        entries.push((name("attn.reduction"), depth * sr));
        entries.push((name("attn.scores_and_context"), depth * 2 * n * m * c));
        entries.push((name("ffn"), depth * (2 * c * hidden * n + 9 * hidden * n)));
        cin = c;
    }
    let d = &cfg.decoder;
    let first = d.input_stages.indices()[0];
    let n = (grids[first].0 * grids[first].1) as u64;
    let ham = d.ham_channels as u64;
    let concat = d.concat_channels(cfg.encoder.dims()) as u64;
    let rank = d.nmf_rank as u64;
    entries.push(("decoder.squeeze".into(), concat * ham * n));
    entries.push(("decoder.hamburger.ham_in".into(), ham * ham * n));
    let per_step = 2 * rank * ham * n + rank * rank * ham + rank * rank * n + rank * rank * n + ham * rank * rank;
    entries.push((
        "decoder.hamburger.nmf".into(),
        d.nmf_steps_eval as u64 * per_step + ham * rank * n,
    ));
    entries.push(("decoder.hamburger.ham_out".into(), ham * ham * n));
    entries.push(("decoder.align".into(), ham * ham * n));
    entries.push(("decoder.classifier".into(), ham * cfg.num_classes as u64 * n));
    let total_macs = entries.iter().map(|(_, v)| v).sum();
    Ok(FlopReport {
        convention: FLOP_CONVENTION.to_string(),
        input: [h, w],
        entries,
        total_macs,
    })
}
