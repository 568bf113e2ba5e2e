//! Samples, class maps, deterministic manifests, PNG I/O, the crop/resize
//! augmentation and a synthetic plume generator.
//!
//! On-disk layout:
//!
//! ```text
//! root/classes.txt                 one class name per line, index = line
//! root/{train,val,test}/images/*.png
//! root/{train,val,test}/masks/*.png  8-bit, pixel = class index, 255 = ignore
//! ```
//!
//! A mask shares its image's file name.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage as PngGray, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

pub const SPLIT_DIRS: [&str; 3] = ["train", "val", "test"];

/// Per-pixel class indices of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Input(format!(
                "mask of {} values cannot be {width}×{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = PngGray::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Input("mask buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    /// Reads a single-channel 8-bit PNG and checks every value is a class
    /// index below `num_classes` or `ignore`.
    pub fn load_png(path: &Path, num_classes: usize, ignore: u8) -> Result<Self> {
        let img = image::open(path)?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Data(format!(
                    "{}: masks must be single-channel 8-bit, found {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let mask = Self::new(gray.width() as usize, gray.height() as usize, gray.into_raw())?;
        if let Some(&bad) = mask.data.iter().find(|&&v| usize::from(v) >= num_classes && v != ignore) {
            return Err(Error::Data(format!(
                "{}: mask value {bad} is not a class index (< {num_classes}) or the ignore value {ignore}",
                path.display()
            )));
        }
        Ok(mask)
    }
}

/// An image (`3×H×W`, intensities 0–255) with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.height || s[2] != mask.width {
            return Err(Error::Input(format!(
                "image {s:?} and {}×{} mask disagree",
                mask.height, mask.width
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// Ordered class names; index 0 is always the background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::config("classes", "need background plus at least one class"));
        }
        if !names[0].eq_ignore_ascii_case("background") {
            return Err(Error::config("classes", format!("index 0 must be `background`, got `{}`", names[0])));
        }
        if names.len() > 255 {
            return Err(Error::config("classes", "at most 255 classes fit beside the ignore value"));
        }
        Ok(Self { names })
    }

    /// Background plus flow rates 10, 20, …, 100 SCCM.
    pub fn methane_release() -> Self {
        let mut names = vec!["background".to_string()];
        names.extend((1..=10).map(|i| format!("{} SCCM", i * 10)));
        Self { names }
    }

    /// Background plus a single gas class.
    pub fn binary() -> Self {
        Self {
            names: vec!["background".into(), "gas".into()],
        }
    }

    /// Background plus `levels` generic plume classes.
    pub fn levels(levels: usize) -> Result<Self> {
        let mut names = vec!["background".to_string()];
        names.extend((1..=levels).map(|i| format!("level {i}")));
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the dataset root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    /// Class the sample was generated for, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: PathBuf,
    pub seed: u64,
    pub classes: ClassMap,
    pub entries: Vec<ManifestEntry>,
}

/// Sample counts for an 80/10/10 split of `n` items.
pub fn split_counts(n: usize) -> [usize; 3] {
    let train = ((n as f64) * 0.8).round() as usize;
    let val = (((n as f64) * 0.1).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    Ok(out)
}

/// Enumerates every image under the split directories, pairs it with its
/// mask, sorts the pairs lexicographically, shuffles them with `seed` and
/// assigns 80/10/10 train/val/test. The resulting assignment depends only on
/// the set of files and the seed, not on where files currently sit.
pub fn scan_and_split(root: &Path, seed: u64) -> Result<Manifest> {
    let classes_path = root.join("classes.txt");
    let classes = if classes_path.exists() {
        ClassMap::load(&classes_path)?
    } else {
        ClassMap::binary()
    };
    let mut pairs = Vec::new();
    for split in SPLIT_DIRS {
        for image in png_files(&root.join(split).join("images"))? {
            let name = image.file_name().expect("file");
            let mask = root.join(split).join("masks").join(name);
            if !mask.is_file() {
                return Err(Error::MissingMask(image));
            }
            let rel = |p: &Path| p.strip_prefix(root).expect("under root").to_path_buf();
            pairs.push((rel(&image), rel(&mask)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Input(format!("no images found under {}", root.display())));
    }
    pairs.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let [train, val, _] = split_counts(pairs.len());
    let entries = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (image, mask))| ManifestEntry {
            image,
            mask,
            split: if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            },
            class_index: None,
        })
        .collect();
    Ok(Manifest {
        root: root.to_path_buf(),
        seed,
        classes,
        entries,
    })
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        Split::ALL.map(|s| self.entries.iter().filter(|e| e.split == s).count())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn load_sample(&self, entry: &ManifestEntry, ignore: u8) -> Result<Sample> {
        load_sample(&self.root, entry, self.classes.len(), ignore)
    }
}

/// Reads an image as 3 channels (gray sources are replicated).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let raw = rgb.into_raw();
    Tensor::new(vec![3, h, w], (0..3 * plane).map(|i| f32::from(raw[(i % plane) * 3 + i / plane])).collect())
}

/// Writes a `3×H×W` 0–255 tensor as an RGB PNG (values rounded and clamped).
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let v = |c: usize| image.data()[c * plane + i].round().clamp(0.0, 255.0) as u8;
        *px = Rgb([v(0), v(1), v(2)]);
    }
    out.save(path)?;
    Ok(())
}

pub fn load_sample(root: &Path, entry: &ManifestEntry, num_classes: usize, ignore: u8) -> Result<Sample> {
    let image = load_image(&root.join(&entry.image))?;
    let mask = Mask::load_png(&root.join(&entry.mask), num_classes, ignore)?;
    Sample::new(image, mask)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    mask.save_png(path)
}

/// Writes a single-channel PNG from 8-bit values.
pub fn save_gray(width: usize, height: usize, data: &[u8], path: &Path) -> Result<()> {
    let img: PngGray = image::ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        Luma([data[y as usize * width + x as usize]])
    });
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Reference (width, height) scaled by the drawn ratio.
    pub base_size: [usize; 2],
    pub ratio_range: [f64; 2],
    /// Output (width, height).
    pub crop_size: [usize; 2],
    pub image_pad: f32,
    pub mask_pad: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            base_size: [640, 480],
            ratio_range: [0.5, 2.0],
            crop_size: [512, 512],
            image_pad: 0.0,
            mask_pad: crate::network::DEFAULT_IGNORE_INDEX,
        }
    }
}

impl AugmentConfig {
    /// Same recipe scaled so the base size is `width×height` and the crop
    /// covers the whole base.
    pub fn desk(width: usize, height: usize) -> Self {
        Self {
            base_size: [width, height],
            crop_size: [width, height],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ratio_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::config("augment.ratio_range", format!("need 0 < low < high, got {lo}..{hi}")));
        }
        if self.crop_size.contains(&0) || self.base_size.contains(&0) {
            return Err(Error::config("augment.crop_size", "extents must be positive"));
        }
        Ok(())
    }
}

/// Size after fitting `(w, h)` inside the base size scaled by `ratio`,
/// keeping the aspect ratio: the long side is bounded by the long target
/// side and the short side by the short one.
pub fn rescaled_size(w: usize, h: usize, base: [usize; 2], ratio: f64) -> (usize, usize) {
    let tw = base[0] as f64 * ratio;
    let th = base[1] as f64 * ratio;
    let (long_t, short_t) = (tw.max(th), tw.min(th));
    let (long, short) = (w.max(h) as f64, w.min(h) as f64);
    let f = (long_t / long).min(short_t / short);
    let nw = ((w as f64 * f) + 0.5).floor().max(1.0) as usize;
    let nh = ((h as f64 * f) + 0.5).floor().max(1.0) as usize;
    (nw, nh)
}

/// Nearest-neighbour resize: every output value is copied from the input.
pub fn resize_mask_nearest(mask: &Mask, w: usize, h: usize) -> Mask {
    let src = |out: usize, n_out: usize, n_in: usize| (((out as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let data = (0..w * h)
        .map(|i| mask.get(src(i % w, w, mask.width), src(i / w, h, mask.height)))
        .collect();
    Mask {
        width: w,
        height: h,
        data,
    }
}

/// Rescales `sample` to `(w, h)`; image bilinear, mask nearest.
pub fn resize_sample(sample: &Sample, w: usize, h: usize) -> Result<Sample> {
    let image = kernels::bilinear_resize(&sample.image, h, w)?;
    Sample::new(image, resize_mask_nearest(&sample.mask, w, h))
}

/// Pads at the bottom/right so both sides reach at least the given extents.
pub fn pad_sample(sample: &Sample, min_w: usize, min_h: usize, image_pad: f32, mask_pad: u8) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let (pw, ph) = (w.max(min_w), h.max(min_h));
    if (pw, ph) == (w, h) {
        return sample.clone();
    }
    let image = Tensor::from_fn(vec![3, ph, pw], |i| {
        let (c, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        if y < h && x < w {
            sample.image.data()[(c * h + y) * w + x]
        } else {
            image_pad
        }
    });
    let mask = Mask {
        width: pw,
        height: ph,
        data: (0..pw * ph)
            .map(|i| {
                let (y, x) = (i / pw, i % pw);
                if y < h && x < w {
                    sample.mask.get(x, y)
                } else {
                    mask_pad
                }
            })
            .collect(),
    };
    Sample { image, mask }
}

pub fn crop_sample(sample: &Sample, x0: usize, y0: usize, w: usize, h: usize) -> Sample {
    let (sw, sh) = (sample.width(), sample.height());
    let image = Tensor::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        sample.image.data()[(c * sh + y0 + y) * sw + x0 + x]
    });
    let mask = Mask {
        width: w,
        height: h,
        data: (0..w * h).map(|i| sample.mask.get(x0 + i % w, y0 + i / w)).collect(),
    };
    Sample { image, mask }
}

/// Random rescale, pad and crop to `cfg.crop_size`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let ratio = rng.gen_range(cfg.ratio_range[0]..=cfg.ratio_range[1]);
    let (w, h) = rescaled_size(sample.width(), sample.height(), cfg.base_size, ratio);
    let scaled = resize_sample(sample, w, h)?;
    let [cw, ch] = cfg.crop_size;
    let padded = pad_sample(&scaled, cw, ch, cfg.image_pad, cfg.mask_pad);
    let x0 = rng.gen_range(0..=padded.width() - cw);
    let y0 = rng.gen_range(0..=padded.height() - ch);
    Ok(crop_sample(&padded, x0, y0, cw, ch))
}

/// Parameters of the synthetic infrared plume scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Background intensity at the top and bottom rows.
    pub background: [f64; 2],
    pub noise_std: f64,
    /// Peak plume contrast per class index.
    pub amplitude_per_class: f64,
    /// Fraction of the peak contribution that defines the mask.
    pub mask_fraction: f64,
    pub max_blobs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            background: [70.0, 120.0],
            noise_std: 2.0,
            amplitude_per_class: 12.0,
            mask_fraction: 0.2,
            max_blobs: 4,
        }
    }
}

/// Plume geometry drawn independently of the class so the same seed gives
/// the same shape at every flow level.
#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    angle: f64,
    weight: f64,
}

fn draw_blobs(rng: &mut impl Rng, w: usize, h: usize, max_blobs: usize) -> Vec<Blob> {
    let (wf, hf) = (w as f64, h as f64);
    let count = rng.gen_range(1..=max_blobs.max(1));
    let source_x = rng.gen_range(0.3..0.7) * wf;
    let source_y = rng.gen_range(0.55..0.8) * hf;
    let drift = rng.gen_range(-0.25..0.25);
    (0..count)
        .map(|i| {
            let rise = i as f64 * rng.gen_range(0.08..0.15) * hf;
            Blob {
                cx: source_x + drift * rise,
                cy: source_y - rise,
                sx: rng.gen_range(0.05..0.1) * wf * (1.0 + 0.3 * i as f64),
                sy: rng.gen_range(0.08..0.16) * hf * (1.0 + 0.2 * i as f64),
                angle: rng.gen_range(-0.4..0.4),
                weight: rng.gen_range(0.6..1.0),
            }
        })
        .collect()
}

/// Normalized plume contribution (peak 1) at each pixel.
fn plume_field(blobs: &[Blob], w: usize, h: usize) -> Vec<f64> {
    let mut field: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            blobs
                .iter()
                .map(|b| {
                    let (dx, dy) = (x - b.cx, y - b.cy);
                    let (s, c) = b.angle.sin_cos();
                    let u = (c * dx + s * dy) / b.sx;
                    let v = (-s * dx + c * dy) / b.sy;
                    b.weight * (-0.5 * (u * u + v * v)).exp()
                })
                .sum()
        })
        .collect();
    let peak = field.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

fn background_field(rng: &mut impl Rng, cfg: &SynthConfig, w: usize, h: usize) -> Vec<f64> {
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    (0..w * h)
        .map(|i| {
            let t = (i / w) as f64 / (h.max(2) - 1) as f64;
            cfg.background[0] + (cfg.background[1] - cfg.background[0]) * t + noise.sample(rng)
        })
        .collect()
}

fn gray_to_rgb(values: &[f64], w: usize, h: usize) -> Tensor<f32> {
    let plane = w * h;
    Tensor::new(
        vec![3, h, w],
        (0..3 * plane).map(|i| values[i % plane].clamp(0.0, 255.0) as f32).collect(),
    )
    .expect("3×h×w")
}

/// Synthetic grayscale OGI frame with a plume of class `k` (0 = none). The
/// plume is brighter for larger `k`; the mask marks pixels whose plume
/// contribution exceeds `mask_fraction` of its peak.
pub fn synth_plume(rng: &mut impl Rng, k: u8, width: usize, height: usize, cfg: &SynthConfig) -> Result<Sample> {
    if width == 0 || height == 0 {
        return Err(Error::Input("synthetic sample needs positive extents".into()));
    }
    let blobs = draw_blobs(rng, width, height, cfg.max_blobs);
    let mut values = background_field(rng, cfg, width, height);
    let mut mask = Mask::filled(width, height, 0);
    if k > 0 {
        let field = plume_field(&blobs, width, height);
        let amp = cfg.amplitude_per_class * f64::from(k);
        for (i, f) in field.iter().enumerate() {
            values[i] += amp * f;
            if *f > cfg.mask_fraction {
                mask.data[i] = k;
            }
        }
    }
    Sample::new(gray_to_rgb(&values, width, height), mask)
}

/// A static scene observed over time: background-only frames followed by
/// frames with a drifting plume, each with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct PlumeSequence {
    pub width: usize,
    pub height: usize,
    pub backgrounds: Vec<Vec<f64>>,
    pub frames: Vec<Vec<f64>>,
    pub truth: Vec<Mask>,
}

/// Generates a sequence with textured static background and per-frame
/// sensor noise; the plume fluctuates around a fixed release geometry.
pub fn synth_sequence(
    rng: &mut impl Rng,
    class_id: u8,
    backgrounds: usize,
    frames: usize,
    width: usize,
    height: usize,
    cfg: &SynthConfig,
) -> PlumeSequence {
    let texture_blobs: Vec<Blob> = (0..6)
        .map(|_| Blob {
            cx: rng.gen_range(0.0..width as f64),
            cy: rng.gen_range(0.0..height as f64),
            sx: rng.gen_range(0.1..0.3) * width as f64,
            sy: rng.gen_range(0.1..0.3) * height as f64,
            angle: 0.0,
            weight: rng.gen_range(-1.0..1.0),
        })
        .collect();
    let scene: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
            let t = (i / width) as f64 / (height.max(2) - 1) as f64;
            let tex: f64 = texture_blobs
                .iter()
                .map(|b| b.weight * (-0.5 * (((x - b.cx) / b.sx).powi(2) + ((y - b.cy) / b.sy).powi(2))).exp())
                .sum();
            cfg.background[0] + (cfg.background[1] - cfg.background[0]) * t + 15.0 * tex
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let noisy = |rng: &mut dyn rand::RngCore| -> Vec<f64> { scene.iter().map(|v| v + noise.sample(rng)).collect() };
    let backgrounds = (0..backgrounds).map(|_| noisy(rng)).collect();
    let mut out_frames = Vec::with_capacity(frames);
    let mut truth = Vec::with_capacity(frames);
    let amp = cfg.amplitude_per_class * f64::from(class_id.max(1));
    // One release per sequence: the source and plume structure stay put and
    // each frame perturbs them slightly, as turbulence does in a video.
    let base = draw_blobs(rng, width, height, cfg.max_blobs);
    for _ in 0..frames {
        let blobs: Vec<Blob> = base
            .iter()
            .map(|b| Blob {
                cx: b.cx + rng.gen_range(-0.03..0.03) * width as f64,
                cy: b.cy + rng.gen_range(-0.03..0.03) * height as f64,
                sx: b.sx * rng.gen_range(0.85..1.15),
                sy: b.sy * rng.gen_range(0.85..1.15),
                angle: b.angle + rng.gen_range(-0.15..0.15),
                weight: b.weight * rng.gen_range(0.85..1.15),
            })
            .collect();
        let field = plume_field(&blobs, width, height);
        let mut frame = noisy(rng);
        let mut mask = Mask::filled(width, height, 0);
        for (i, f) in field.iter().enumerate() {
            frame[i] += amp * f;
            if *f > cfg.mask_fraction {
                mask.data[i] = class_id;
            }
        }
        out_frames.push(frame);
        truth.push(mask);
    }
    PlumeSequence {
        width,
        height,
        backgrounds,
        frames: out_frames,
        truth,
    }
}

/// Writes `count` synthetic samples with classes drawn uniformly from
/// `1..num_classes` into the dataset layout and returns the split manifest.
pub fn write_synthetic_dataset(
    root: &Path,
    classes: &ClassMap,
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Input("count must be positive".into()));
    }
    for split in SPLIT_DIRS {
        fs::create_dir_all(root.join(split).join("images"))?;
        fs::create_dir_all(root.join(split).join("masks"))?;
    }
    classes.save(&root.join("classes.txt"))?;
    let samples = synthetic_samples(count, classes.len(), width, height, seed, cfg)?;
    // Files first land in train/; the manifest split is what assigns them.
    let mut ks = Vec::with_capacity(count);
    for (i, (k, s)) in samples.iter().enumerate() {
        let name = format!("synth_{i:05}.png");
        save_image(&s.image, &root.join("train/images").join(&name))?;
        s.mask.save_png(&root.join("train/masks").join(&name))?;
        ks.push((PathBuf::from("train/images").join(&name), *k));
    }
    let mut manifest = scan_and_split(root, seed)?;
    for e in &mut manifest.entries {
        e.class_index = ks.iter().find(|(p, _)| *p == e.image).map(|(_, k)| usize::from(*k));
    }
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// In-memory synthetic samples; sample `i` uses its own RNG stream so
/// results do not depend on generation order.
pub fn synthetic_samples(
    count: usize,
    num_classes: usize,
    width: usize,
    height: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<(u8, Sample)>> {
    if num_classes < 2 || num_classes > 255 {
        return Err(Error::config("num_classes", "must be in 2..=255"));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let k = rng.gen_range(1..num_classes) as u8;
            synth_plume(&mut rng, k, width, height, cfg).map(|s| (k, s))
        })
        .collect()
}
