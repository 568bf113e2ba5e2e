#![allow(dead_code)]

use gasformer::{Tensor, Element};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.gen_range(-scale..scale)))
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad<T: Element>(x: &Tensor<T>, h: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data_mut()[i] = T::from_f64_lossy(plus.data()[i].to_f64_lossy() + h);
            minus.data_mut()[i] = T::from_f64_lossy(minus.data()[i].to_f64_lossy() - h);
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 { 0.0 } else { diff / denom }
}

pub fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Binary IoU of two masks (non-zero = foreground); 1 when both are empty.
pub fn mask_iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x > 0 && y > 0);
        union += usize::from(x > 0 || y > 0);
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

/// Per-frame IoUs of the labeler on synthetic release sequences.
///
/// Each sequence gets its own threshold offset, chosen from a fixed grid on
/// `calibration` extra frames that are excluded from scoring; the scored
/// frames never influence the configuration.
pub fn labeler_recovery(sequences: usize, scored: usize, calibration: usize, size: usize) -> Vec<f64> {
    use gasformer::dataset::{synth_sequence, SynthConfig};
    use gasformer::labeler::{run_pipeline, GrayImage, LabelerConfig};

    let mut ious = Vec::new();
    for s in 0..sequences {
        let mut g = rng(1000 + s as u64);
        let seq = synth_sequence(&mut g, 10, 10, calibration + scored, size, size, &SynthConfig::default());
        let gray = |v: &Vec<f64>| GrayImage::new(size, size, v.clone()).unwrap();
        let backgrounds: Vec<GrayImage> = seq.backgrounds.iter().map(gray).collect();
        let frames: Vec<GrayImage> = seq.frames.iter().map(gray).collect();
        let (calib, test) = frames.split_at(calibration);
        let base = LabelerConfig { contrast_high_pct: 100.0, thresh_block: 2 * size - 1, class_id: 10, ..Default::default() };
        let score = |cfg: &LabelerConfig, frames: &[GrayImage], truth: &[gasformer::dataset::Mask]| -> Vec<f64> {
            run_pipeline(&backgrounds, frames, cfg)
                .unwrap()
                .iter()
                .zip(truth)
                .map(|(m, t)| mask_iou(&m.data, &t.data))
                .collect()
        };
        let best = (2..=9)
            .map(|i| LabelerConfig { thresh_offset: 5.0 * i as f64, ..base.clone() })
            .map(|cfg| {
                let v = score(&cfg, calib, &seq.truth[..calibration]);
                (v.iter().sum::<f64>(), cfg)
            })
            .fold(None::<(f64, LabelerConfig)>, |acc, (v, c)| match acc {
                Some((bv, bc)) if bv >= v => Some((bv, bc)),
                _ => Some((v, c)),
            })
            .unwrap()
            .1;
        ious.extend(score(&best, test, &seq.truth[calibration..]));
    }
    ious
}
