//! Optimization and evaluation: AdamW, the warmup + polynomial schedule,
//! per-pixel cross-entropy, confusion matrices and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, Mask, Sample};
use crate::decoder::NmfMode;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{kernels, Element, Tape, Tensor};

/// First and second moment estimates per parameter, aligned with the
/// parameter store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T = f32> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Whether biases and normalization parameters are also decayed.
    pub decay_bias_and_norm: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            decay_bias_and_norm: false,
        }
    }
}

/// One AdamW update: decoupled decay `w ← w(1 − lr·wd)` followed by the
/// bias-corrected Adam step. `grads` is aligned with the parameter store;
/// `None` means the parameter received no gradient (treated as zero).
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Input(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = match p.kind {
            ParamKind::Weight => cfg.weight_decay,
            ParamKind::Bias | ParamKind::Norm if cfg.decay_bias_and_norm => cfg.weight_decay,
            _ => 0.0,
        };
        let g = grads[i].as_ref();
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::dim(format!("gradient shape {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape())));
            }
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let gj = g.map_or(0.0, |g| g.data()[j].to_f64_lossy());
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let mut wj = w[j].to_f64_lossy();
            if decay != 0.0 {
                wj *= 1.0 - lr * decay;
            }
            wj -= lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            w[j] = T::from_f64_lossy(wj);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_start_factor: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            warmup_iters: 1500,
            warmup_start_factor: 1e-6,
            total_iters: 160_000,
            poly_power: 1.0,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(Error::config("schedule.warmup_iters", "must be below total_iters"));
        }
        if !(self.base_lr > 0.0 && self.warmup_start_factor > 0.0 && self.poly_power > 0.0) {
            return Err(Error::config("schedule.base_lr", "rates, factors and power must be positive"));
        }
        if !(0.0..=self.base_lr).contains(&self.min_lr) {
            return Err(Error::config("schedule.min_lr", "must lie in [0, base_lr]"));
        }
        Ok(())
    }
}

/// Learning rate at `iter`: a linear ramp from `base·start_factor` to
/// `base` over the warmup, then polynomial decay to `min_lr` at
/// `total_iters`.
pub fn lr_at(iter: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if iter > cfg.total_iters {
        return Err(Error::Domain(format!("iteration {iter} beyond total {}", cfg.total_iters)));
    }
    if iter < cfg.warmup_iters {
        let f = cfg.warmup_start_factor;
        return Ok(cfg.base_lr * (f + (1.0 - f) * iter as f64 / cfg.warmup_iters as f64));
    }
    let progress = (iter - cfg.warmup_iters) as f64 / (cfg.total_iters - cfg.warmup_iters) as f64;
    Ok((cfg.base_lr - cfg.min_lr) * (1.0 - progress).powf(cfg.poly_power) + cfg.min_lr)
}

/// Mean cross-entropy over non-ignored pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub scored: usize,
    /// Set when every pixel was ignored; the loss is then 0.
    pub all_ignored: bool,
}

/// Cross-entropy of `K×h×w` logits against an `H×W` target; logits are
/// bilinearly resized to the target first when sizes differ.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, target: &Mask, ignore: u8) -> Result<CrossEntropy> {
    if logits.rank() != 3 {
        return Err(Error::dim(format!("logits must be K×h×w, got {:?}", logits.shape())));
    }
    let resized;
    let logits = if logits.shape()[1..] == [target.height, target.width] {
        logits
    } else {
        resized = kernels::bilinear_resize(logits, target.height, target.width)?;
        &resized
    };
    let (loss, scored) = kernels::cross_entropy(logits, &target.data, ignore)?;
    Ok(CrossEntropy {
        loss: loss.to_f64_lossy(),
        scored,
        all_ignored: scored == 0,
    })
}

/// `K×K` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; pixels whose target is `ignore` are skipped.
    pub fn accumulate(&mut self, prediction: &[u8], target: &[u8], ignore: u8) -> Result<()> {
        if prediction.len() != target.len() {
            return Err(Error::Input(format!(
                "prediction has {} pixels, target {}",
                prediction.len(),
                target.len()
            )));
        }
        let k = self.classes;
        let bad = |v: u8| usize::from(v) >= k;
        if let Some((&p, &t)) = prediction.iter().zip(target).find(|(&p, &t)| t != ignore && (bad(p) || bad(t))) {
            return Err(Error::Data(format!("class index out of range: target {t}, prediction {p} with {k} classes")));
        }
        for (&p, &t) in prediction.iter().zip(target) {
            if t != ignore {
                self.counts[usize::from(t) * k + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: Vec<f64>,
    pub fscore: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Whether a class occurs in the ground truth or the predictions;
    /// absent classes are left out of the means.
    pub present: Vec<bool>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mFscore")]
    pub mfscore: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes;
    let mut r = MetricsReport {
        iou: vec![0.0; k],
        fscore: vec![0.0; k],
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        present: vec![false; k],
        miou: 0.0,
        mfscore: 0.0,
    };
    for c in 0..k {
        let tp = cm.get(c, c);
        let truth: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let (fn_, fp) = (truth - tp, pred - tp);
        r.present[c] = truth + pred > 0;
        r.iou[c] = ratio(tp, tp + fp + fn_);
        r.precision[c] = ratio(tp, tp + fp);
        r.recall[c] = ratio(tp, tp + fn_);
        let (p, q) = (r.precision[c], r.recall[c]);
        r.fscore[c] = if p + q > 0.0 { 2.0 * p * q / (p + q) } else { 0.0 };
    }
    let n = r.present.iter().filter(|&&p| p).count();
    if n > 0 {
        let mean = |v: &[f64]| v.iter().zip(&r.present).filter(|(_, &p)| p).map(|(x, _)| x).sum::<f64>() / n as f64;
        r.miou = mean(&r.iou);
        r.mfscore = mean(&r.fscore);
    }
    r
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned per-class table with IoU and Fscore in percent.
    pub fn to_table(&self, names: &[String]) -> String {
        let width = names.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}", "Class", "IoU", "Fscore");
        for c in 0..self.iou.len() {
            let fallback = c.to_string();
            let name = names.get(c).unwrap_or(&fallback);
            if self.present[c] {
                let _ = writeln!(s, "{name:<width$}  {:>7.2}  {:>7.2}", self.iou[c] * 100.0, self.fscore[c] * 100.0);
            } else {
                let _ = writeln!(s, "{name:<width$}  {:>7}  {:>7}", "-", "-");
            }
        }
        let _ = writeln!(s, "{:<width$}  {:>7.2}  {:>7.2}", "Mean", self.miou * 100.0, self.mfscore * 100.0);
        s
    }
}

/// Random access to samples, in memory or on disk.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Confusion-matrix evaluation with an arbitrary per-sample predictor.
pub fn evaluate_with<S, F>(source: &S, classes: usize, ignore: u8, predict: F) -> Result<(ConfusionMatrix, MetricsReport)>
where
    S: SampleSource + ?Sized,
    F: Fn(&Sample) -> Result<Vec<u8>> + Sync,
{
    if source.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let partial: Vec<ConfusionMatrix> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let sample = source.get(i)?;
            let pred = predict(&sample)?;
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&pred, &sample.mask.data, ignore)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(classes);
    for p in &partial {
        cm.merge(p);
    }
    let report = metrics_from_confusion(&cm);
    Ok((cm, report))
}

/// Whole-image inference over every sample.
pub fn evaluate<S: SampleSource + ?Sized>(model: &Model<f32>, source: &S) -> Result<(ConfusionMatrix, MetricsReport)> {
    evaluate_with(source, model.config.num_classes, model.config.ignore_index, |s| {
        let image = model.normalize_image(&s.image)?;
        Ok(model.infer(&image, false)?.labels)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    /// `None` trains on samples as they are.
    pub augment: Option<AugmentConfig>,
    /// Validation interval; 0 means every `total_iters / 10`.
    pub val_interval: usize,
    /// Learning-rate multiplier for the decoder (1 keeps one global rate).
    pub decoder_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            augment: Some(AugmentConfig::default()),
            val_interval: 0,
            decoder_lr_mult: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if !(self.decoder_lr_mult > 0.0) {
            return Err(Error::config("train.decoder_lr_mult", "must be positive"));
        }
        Ok(())
    }

    pub fn validation_interval(&self) -> usize {
        if self.val_interval > 0 {
            self.val_interval
        } else {
            (self.schedule.total_iters / 10).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub iter: usize,
    pub miou: f64,
    pub mfscore: f64,
}

/// Events emitted while training, in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogEvent {
    Step(StepRecord),
    Validation(ValRecord),
}

impl LogEvent {
    /// The plain-text log line: `iter,lr,loss` or `iter,mIoU,mFscore`.
    pub fn line(&self) -> String {
        match self {
            LogEvent::Step(s) => format!("{},{:e},{:.6}", s.iter, s.lr, s.loss),
            LogEvent::Validation(v) => format!("{},{:.6},{:.6}", v.iter, v.miou, v.mfscore),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimState,
    pub log: TrainLog,
}

fn grad_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Mean loss and summed gradients of one sample.
fn sample_gradients(model: &Model<f32>, sample: &Sample, nmf_seed: u64) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let image = model.normalize_image(&sample.image)?;
    let mut tape = Tape::new();
    let (loss, pass) = model.loss(&mut tape, &image, &sample.mask.data, NmfMode::Train { seed: nmf_seed })?;
    let value = f64::from(tape.value(loss).item());
    let mut grads = tape.backward(loss)?;
    let out = pass.params.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((value, out))
}

/// Mini-batch AdamW training from `start_iter` to the schedule's total.
/// Batches are drawn from a seeded per-epoch shuffle; all randomness
/// (order, augmentation, NMF initialization) derives from `seed`.
/// Validation runs every [`TrainConfig::validation_interval`] iterations and
/// after the last one when `val` is given.
pub fn train<S, V>(
    mut model: Model<f32>,
    train_set: &S,
    val: Option<&V>,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<(usize, OptimState)>,
    mut on_event: impl FnMut(&LogEvent),
) -> Result<TrainOutcome>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let (start, mut optimizer) = resume.unwrap_or_else(|| (0, OptimState::new(&model.params)));
    let total = cfg.schedule.total_iters;
    let interval = cfg.validation_interval();
    let decoder_mask: Vec<bool> = model.params.iter().map(|(_, p)| p.name.starts_with("decoder.")).collect();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;

    for iter in start..total {
        let lr = lr_at(iter, &cfg.schedule)?;
        let mut iter_rng = ChaCha8Rng::seed_from_u64(seed);
        iter_rng.set_stream(iter as u64 + 1);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                epoch_rng.set_stream(epoch);
                order = (0..train_set.len()).collect();
                order.shuffle(&mut epoch_rng);
                cursor = 0;
                epoch += 1;
            }
            let sample = train_set.get(order[cursor])?;
            cursor += 1;
            let sample = match &cfg.augment {
                Some(a) => augment(&sample, a, &mut iter_rng)?,
                None => sample,
            };
            batch.push((sample, iter_rng.gen::<u64>()));
        }
        let results: Vec<_> = batch
            .par_iter()
            .map(|(s, nmf_seed)| sample_gradients(&model, s, *nmf_seed))
            .collect();
        let mut loss = 0.0;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        let scale = 1.0 / cfg.batch_size as f32;
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    iteration: iter,
                    lr,
                    grad_norm: f64::NAN,
                    reason: format!("non-finite value in `{op}`"),
                },
                other => other,
            })?;
            loss += l / cfg.batch_size as f64;
            for (acc, g) in grads.iter_mut().zip(g) {
                if let Some(g) = g {
                    let g = g.map(|v| v * scale);
                    match acc {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                lr,
                grad_norm: norm,
                reason: format!("loss {loss}"),
            });
        }
        step_with_groups(&mut model.params, &grads, &mut optimizer, lr, cfg, &decoder_mask)?;
        let record = StepRecord { iter, lr, loss };
        log.steps.push(record);
        on_event(&LogEvent::Step(record));

        let done = iter + 1;
        if let Some(val) = val {
            if done % interval == 0 || done == total {
                let (_, report) = evaluate(&model, val)?;
                let v = ValRecord {
                    iter: done,
                    miou: report.miou,
                    mfscore: report.mfscore,
                };
                log.validations.push(v);
                on_event(&LogEvent::Validation(v));
            }
        }
    }
    Ok(TrainOutcome { model, optimizer, log })
}

/// AdamW with the decoder parameters optionally on a scaled learning rate.
fn step_with_groups(
    params: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
    decoder_mask: &[bool],
) -> Result<()> {
    if cfg.decoder_lr_mult == 1.0 {
        return adamw_step(params, grads, state, lr, &cfg.optimizer);
    }
    // Run the shared step at the base rate, then add the extra decoder
    // displacement: equivalent to a per-group rate since each element's
    // update is linear in lr for fixed moments.
    let before: Vec<Tensor<f32>> = params.iter().map(|(_, p)| p.value.clone()).collect();
    adamw_step(params, grads, state, lr, &cfg.optimizer)?;
    let extra = cfg.decoder_lr_mult - 1.0;
    for ((p, old), &dec) in params.iter_mut().zip(&before).zip(decoder_mask) {
        if dec {
            for (w, &o) in p.value.data_mut().iter_mut().zip(old.data()) {
                let delta = f64::from(*w) - f64::from(o);
                *w = (f64::from(*w) + extra * delta) as f32;
            }
        }
    }
    Ok(())
}
