//! Light-Ham decoder: selected encoder stages are resampled to the grid of
//! the finest selected stage and concatenated, squeezed to `ham_channels`,
//! refined by a Hamburger block (NMF between two 1×1 maps), aligned and
//! classified per pixel.

use serde::{Deserialize, Serialize};

use crate::encoder::StageFeatures;
use crate::error::{Error, Result};
use crate::nmf::{self, NmfFactors};
use crate::nn::{Bound, Conv2d, GroupNorm, ParamBuilder};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{Element, Tape, Var};

/// Which encoder outputs feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSet {
    /// F2, F3, F4.
    Three,
    /// F1, F2, F3, F4.
    Four,
}

impl StageSet {
    pub fn indices(self) -> &'static [usize] {
        match self {
            StageSet::Three => &[1, 2, 3],
            StageSet::Four => &[0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub input_stages: StageSet,
    pub ham_channels: usize,
    pub nmf_rank: usize,
    pub nmf_steps_train: usize,
    pub nmf_steps_eval: usize,
    pub epsilon: f64,
    /// Group count of the align layer's group normalization.
    pub norm_groups: usize,
    /// NMF initialization seed used in eval mode.
    pub eval_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            input_stages: StageSet::Four,
            ham_channels: 256,
            nmf_rank: 16,
            nmf_steps_train: 6,
            nmf_steps_eval: 7,
            epsilon: 1e-6,
            norm_groups: 32,
            eval_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ham_channels == 0 {
            return Err(Error::config("decoder.ham_channels", "must be positive"));
        }
        if self.nmf_rank == 0 {
            return Err(Error::config("decoder.nmf_rank", "must be at least 1"));
        }
        if self.nmf_steps_train == 0 || self.nmf_steps_eval == 0 {
            return Err(Error::config("decoder.nmf_steps_train", "NMF step counts must be at least 1"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("decoder.epsilon", "must be positive"));
        }
        if self.norm_groups == 0 || self.ham_channels % self.norm_groups != 0 {
            return Err(Error::config(
                "decoder.norm_groups",
                format!("{} groups do not divide {} channels", self.norm_groups, self.ham_channels),
            ));
        }
        Ok(())
    }

    /// Channel count of the concatenated decoder input.
    pub fn concat_channels(&self, dims: [usize; 4]) -> usize {
        self.input_stages.indices().iter().map(|&i| dims[i]).sum()
    }
}

/// How the NMF factors are initialized on a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmfMode {
    /// `nmf_steps_train` steps from the given seed.
    Train { seed: u64 },
    /// `nmf_steps_eval` steps from the configured eval seed.
    Eval,
}

/// Lower 1×1 map, NMF reconstruction, upper 1×1 map and a rectified residual.
#[derive(Debug, Clone)]
pub struct Hamburger {
    pub lower: Conv2d,
    pub upper: Conv2d,
    pub rank: usize,
    pub steps_train: usize,
    pub steps_eval: usize,
    pub epsilon: f64,
    pub eval_seed: u64,
}

impl Hamburger {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.ham_channels;
        Ok(Self {
            lower: Conv2d::new(b, "ham_in", c, c, 1, ConvSpec::new(1, 0, 1), true)?,
            upper: Conv2d::new(b, "ham_out", c, c, 1, ConvSpec::new(1, 0, 1), true)?,
            rank: cfg.nmf_rank,
            steps_train: cfg.nmf_steps_train,
            steps_eval: cfg.nmf_steps_eval,
            epsilon: cfg.epsilon,
            eval_seed: cfg.eval_seed,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mode: NmfMode) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.lower.in_channels {
            return Err(Error::dim(format!(
                "hamburger expects {} channels, got {s:?}",
                self.lower.in_channels
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let enjoy = self.lower.forward(tape, p, x)?;
        let enjoy = tape.relu(enjoy)?;
        let flat = tape.reshape(enjoy, &[c, h * w])?;
        let recon = self.decompose(tape, flat, mode)?;
        let recon = tape.reshape(recon, &[c, h, w])?;
        let out = self.upper.forward(tape, p, recon)?;
        let sum = tape.add(x, out)?;
        tape.relu(sum)
    }

    /// NMF reconstruction of a non-negative `d×n` matrix. All but the last
    /// update run off the tape; the last one is recorded so gradients reach
    /// the input through a single step.
    fn decompose<T: Element>(&self, tape: &mut Tape<T>, x: Var, mode: NmfMode) -> Result<Var> {
        let (steps, seed) = match mode {
            NmfMode::Train { seed } => (self.steps_train, seed),
            NmfMode::Eval => (self.steps_eval, self.eval_seed),
        };
        let (d, n) = nmf::check_input(tape.value(x))?;
        let mut factors: NmfFactors<T> = nmf::init_factors(d, n, self.rank, seed);
        for _ in 1..steps {
            nmf::update_step(tape.value(x), &mut factors, self.epsilon);
        }
        let NmfFactors { dictionary, codes } = factors;
        let dict0 = tape.constant(dictionary)?;
        let codes0 = tape.constant(codes)?;
        let eps = self.epsilon;

        let dict_t = tape.transpose(dict0)?;
        let num_c = tape.matmul(dict_t, x)?;
        let dtd = tape.matmul(dict_t, dict0)?;
        let den_c = tape.matmul(dtd, codes0)?;
        let den_c = tape.add_scalar(den_c, eps)?;
        let codes = tape.mul(codes0, num_c)?;
        let codes = tape.div(codes, den_c)?;

        let codes_t = tape.transpose(codes)?;
        let num_d = tape.matmul(x, codes_t)?;
        let cct = tape.matmul(codes, codes_t)?;
        let den_d = tape.matmul(dict0, cct)?;
        let den_d = tape.add_scalar(den_d, eps)?;
        let dict = tape.mul(dict0, num_d)?;
        let dict = tape.div(dict, den_d)?;

        tape.matmul(dict, codes)
    }

    pub fn num_params(&self) -> usize {
        self.lower.num_params() + self.upper.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub squeeze: Conv2d,
    pub hamburger: Hamburger,
    pub align: Conv2d,
    pub align_norm: GroupNorm,
    pub classifier: Conv2d,
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, cfg: &DecoderConfig, dims: [usize; 4], num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.ham_channels;
        let one = ConvSpec::new(1, 0, 1);
        Ok(Self {
            squeeze: Conv2d::new(b, "squeeze", cfg.concat_channels(dims), c, 1, one, true)?,
            hamburger: Hamburger::new(&mut b.sub("hamburger"), cfg)?,
            align: Conv2d::new(b, "align", c, c, 1, one, false)?,
            align_norm: GroupNorm::new(b, "align_norm", c, cfg.norm_groups, 1e-5)?,
            classifier: Self::new_classifier(b, c, num_classes)?,
            config: cfg.clone(),
        })
    }

    pub(crate) fn new_classifier<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize, num_classes: usize) -> Result<Conv2d> {
        Conv2d::new(b, "classifier", channels, num_classes, 1, ConvSpec::new(1, 0, 1), true)
    }

    /// Logits `K×h×w` on the grid of the finest selected stage.
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, features: &StageFeatures, mode: NmfMode) -> Result<Var> {
        let selected = self.config.input_stages.indices();
        let first = features.maps[selected[0]];
        let (h, w) = (tape.shape(first)[1], tape.shape(first)[2]);
        let mut parts = Vec::with_capacity(selected.len());
        for &i in selected {
            let m = features.maps[i];
            parts.push(tape.bilinear_resize(m, h, w)?);
        }
        let cat = tape.concat0(&parts)?;
        if tape.shape(cat)[0] != self.squeeze.in_channels {
            return Err(Error::config(
                "decoder.input_stages",
                format!(
                    "stage features carry {} channels, squeeze expects {}",
                    tape.shape(cat)[0],
                    self.squeeze.in_channels
                ),
            ));
        }
        let x = self.squeeze.forward(tape, p, cat)?;
        let x = tape.relu(x)?;
        let x = self.hamburger.forward(tape, p, x, mode)?;
        let x = self.align.forward(tape, p, x)?;
        let x = self.align_norm.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        self.classifier.forward(tape, p, x)
    }

    pub fn num_params(&self) -> usize {
        self.squeeze.num_params()
            + self.hamburger.num_params()
            + self.align.num_params()
            + self.align_norm.num_params()
            + self.classifier.num_params()
    }
}
