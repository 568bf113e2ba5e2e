//! Semi-automated plume mask generation from OGI frame sequences.
//!
//! Per frame: subtract the averaged background, stretch contrast, threshold
//! against the local mean, refine regions with a marker-based watershed on
//! the Sobel elevation map, then drop small regions and everything on or
//! below the separation lines.

use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Mask;
use crate::error::{Error, Result};

/// Float intensity grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Input(format!("{} values do not form a {width}×{height} image", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image intensities must be finite".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            width,
            height,
            data: (0..width * height).map(|i| f(i % width, i / width)).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_size(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Loads any PNG as luminance.
    pub fn load_png(path: &Path) -> Result<Self> {
        let g = image::open(path)?.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        Self::new(w, h, g.into_raw().into_iter().map(f64::from).collect())
    }

    /// Saves rounded, clamped 8-bit luminance.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        crate::dataset::save_gray(self.width, self.height, &bytes, path)
    }
}

/// Foreground flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binary {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Binary {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Region labels; 0 is background, regions are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    pub contrast_low_pct: f64,
    pub contrast_high_pct: f64,
    /// Odd side length of the local-mean window.
    pub thresh_block: usize,
    /// Margin above the local mean a pixel needs to count as foreground.
    pub thresh_offset: f64,
    pub min_region_size: usize,
    /// Rows at or below each of these are cleared.
    pub separation_y: Vec<usize>,
    pub class_id: u8,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            contrast_low_pct: 2.0,
            contrast_high_pct: 98.0,
            thresh_block: 51,
            thresh_offset: 10.0,
            min_region_size: 20,
            separation_y: Vec::new(),
            class_id: 1,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresh_block < 3 || self.thresh_block % 2 == 0 {
            return Err(Error::config("thresh_block", format!("must be odd and at least 3, got {}", self.thresh_block)));
        }
        let (lo, hi) = (self.contrast_low_pct, self.contrast_high_pct);
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::config("contrast_low_pct", format!("need 0 <= low < high <= 100, got {lo}, {hi}")));
        }
        if !self.thresh_offset.is_finite() {
            return Err(Error::config("thresh_offset", "must be finite"));
        }
        if self.class_id == 0 || self.class_id == crate::network::DEFAULT_IGNORE_INDEX {
            return Err(Error::config("class_id", "must differ from background (0) and ignore (255)"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Per-pixel mean of equally sized frames.
pub fn average_background(frames: &[GrayImage]) -> Result<GrayImage> {
    let first = frames.first().ok_or_else(|| Error::Input("no background frames".into()))?;
    if let Some(bad) = frames.iter().find(|f| !f.same_size(first)) {
        return Err(Error::Input(format!(
            "background frames differ in size: {}×{} vs {}×{}",
            first.width, first.height, bad.width, bad.height
        )));
    }
    let n = frames.len() as f64;
    let data = (0..first.data.len())
        .map(|i| frames.iter().map(|f| f.data[i]).sum::<f64>() / n)
        .collect();
    Ok(GrayImage {
        width: first.width,
        height: first.height,
        data,
    })
}

/// Linear-interpolated percentile of unsorted values, `pct` in [0, 100].
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `|frame − background|` stretched so the low/high percentiles map to 0
/// and 255, clamped and rounded to whole intensities. A flat difference
/// image maps to all zeros.
pub fn subtract_enhance(frame: &GrayImage, background: &GrayImage, cfg: &LabelerConfig) -> Result<GrayImage> {
    if !frame.same_size(background) {
        return Err(Error::Input(format!(
            "frame {}×{} and background {}×{} differ",
            frame.width, frame.height, background.width, background.height
        )));
    }
    let diff: Vec<f64> = frame.data.iter().zip(&background.data).map(|(a, b)| (a - b).abs()).collect();
    let lo = percentile(&diff, cfg.contrast_low_pct);
    let hi = percentile(&diff, cfg.contrast_high_pct);
    let range = hi - lo;
    let data = diff
        .iter()
        .map(|&d| {
            if range > 0.0 {
                (((d - lo) / range).clamp(0.0, 1.0) * 255.0).round()
            } else {
                0.0
            }
        })
        .collect();
    Ok(GrayImage {
        width: frame.width,
        height: frame.height,
        data,
    })
}

/// Index into `0..n` of position `i` (may be negative or ≥ n) under
/// half-sample symmetric mirroring, repeated as often as needed.
pub fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Sliding window sums of length `block` along one line with mirrored ends.
fn window_sums(line: &[f64], block: usize) -> Vec<f64> {
    let n = line.len();
    let r = (block / 2) as isize;
    let mut prefix = Vec::with_capacity(n + block);
    prefix.push(0.0);
    for i in -r..(n as isize + r) {
        let last = *prefix.last().expect("non-empty");
        prefix.push(last + line[mirror(i, n)]);
    }
    (0..n).map(|i| prefix[i + block] - prefix[i]).collect()
}

/// Foreground where `value > mean(block×block window) + offset`, so a
/// positive offset is the margin a pixel must clear above its surroundings.
/// Windows reaching past the border are mirrored. The comparison is done on window
/// sums, so integer-valued inputs are decided exactly.
pub fn adaptive_threshold(img: &GrayImage, block: usize, offset: f64) -> Result<Binary> {
    if block < 3 || block % 2 == 0 {
        return Err(Error::config("thresh_block", format!("must be odd and at least 3, got {block}")));
    }
    let (w, h) = (img.width, img.height);
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        let sums = window_sums(&img.data[y * w..(y + 1) * w], block);
        rows[y * w..(y + 1) * w].copy_from_slice(&sums);
    }
    let mut sums = vec![0.0; w * h];
    let mut column = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = rows[y * w + x];
        }
        for (y, s) in window_sums(&column, block).into_iter().enumerate() {
            sums[y * w + x] = s;
        }
    }
    let area = (block * block) as f64;
    let data = img
        .data
        .iter()
        .zip(&sums)
        .map(|(&v, &s)| v * area > s + offset * area)
        .collect();
    Ok(Binary { width: w, height: h, data })
}

/// Sobel gradient magnitude with mirrored borders.
pub fn sobel(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let at = |x: isize, y: isize| img.get(mirror(x, w), mirror(y, h));
    GrayImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        (gx * gx + gy * gy).sqrt()
    })
}

fn neighbours8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .filter_map(move |(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
        })
}

/// 3×3 erosion; pixels outside the image count as background.
pub fn erode(b: &Binary) -> Binary {
    let (w, h) = (b.width, b.height);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            b.data[i] && x > 0 && y > 0 && x + 1 < w && y + 1 < h && neighbours8(x, y, w, h).all(|(nx, ny)| b.data[ny * w + nx])
        })
        .collect();
    Binary { width: w, height: h, data }
}

/// 3×3 dilation.
pub fn dilate(b: &Binary) -> Binary {
    let (w, h) = (b.width, b.height);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            b.data[i] || neighbours8(x, y, w, h).any(|(nx, ny)| b.data[ny * w + nx])
        })
        .collect();
    Binary { width: w, height: h, data }
}

/// 8-connected components of the foreground, numbered in raster order.
pub fn connected_components(b: &Binary) -> Labels {
    components_by_key(b.width, b.height, |i| u32::from(b.data[i]))
}

/// 8-connected pieces of pixels sharing the same non-zero key.
fn components_by_key(w: usize, h: usize, key: impl Fn(usize) -> u32) -> Labels {
    let mut labels = vec![0u32; w * h];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        let k = key(start);
        if k == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for (nx, ny) in neighbours8(i % w, i / w, w, h) {
                let j = ny * w + nx;
                if labels[j] == 0 && key(j) == k {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    Labels {
        width: w,
        height: h,
        data: labels,
        count: next,
    }
}

#[derive(PartialEq)]
struct Pending {
    elevation: f64,
    order: u64,
    index: usize,
    label: u32,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on elevation, then first-in first-out.
        other
            .elevation
            .total_cmp(&self.elevation)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled watershed.
///
/// Markers are the connected components of the eroded foreground (a
/// component too thin to survive erosion keeps all its pixels as marker)
/// plus a background marker on everything outside the dilated foreground.
/// Markers grow over the Sobel elevation of `enhanced`: unlabelled pixels
/// are taken in order of increasing elevation (first come first served on
/// ties) by the region that reached them. Pixels claimed by the background
/// marker end up 0.
pub fn watershed_refine(enhanced: &GrayImage, binary: &Binary) -> Result<Labels> {
    if enhanced.width != binary.width || enhanced.height != binary.height {
        return Err(Error::Input("enhanced image and binary mask differ in size".into()));
    }
    let (w, h) = (binary.width, binary.height);
    let elevation = sobel(enhanced);
    let eroded = erode(binary);
    let mut markers = connected_components(&eroded);
    let whole = connected_components(binary);
    let mut has_core = vec![false; whole.count as usize + 1];
    for i in 0..w * h {
        if markers.data[i] != 0 {
            has_core[whole.data[i] as usize] = true;
        }
    }
    let mut thin_label = vec![0u32; whole.count as usize + 1];
    for i in 0..w * h {
        let c = whole.data[i] as usize;
        if c != 0 && !has_core[c] {
            if thin_label[c] == 0 {
                markers.count += 1;
                thin_label[c] = markers.count;
            }
            markers.data[i] = thin_label[c];
        }
    }
    let background = markers.count + 1;
    let grown = dilate(binary);
    for i in 0..w * h {
        if !grown.data[i] {
            markers.data[i] = background;
        }
    }

    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let labels = &mut markers.data;
    let mut push = |heap: &mut BinaryHeap<Pending>, j: usize, label: u32| {
        heap.push(Pending {
            elevation: elevation.data[j],
            order,
            index: j,
            label,
        });
        order += 1;
    };
    for i in 0..w * h {
        if labels[i] != 0 {
            for (nx, ny) in four(i % w, i / w, w, h) {
                let j = ny * w + nx;
                if labels[j] == 0 {
                    push(&mut heap, j, labels[i]);
                }
            }
        }
    }
    while let Some(Pending { index, label, .. }) = heap.pop() {
        if labels[index] != 0 {
            continue;
        }
        labels[index] = label;
        for (nx, ny) in four(index % w, index / w, w, h) {
            let j = ny * w + nx;
            if labels[j] == 0 {
                push(&mut heap, j, label);
            }
        }
    }
    for l in labels.iter_mut() {
        if *l == background {
            *l = 0;
        }
    }
    Ok(relabel(markers.data, w, h))
}

fn four(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = [(usize::MAX, 0); 4];
    let mut n = 0;
    if x > 0 {
        out[n] = (x - 1, y);
        n += 1;
    }
    if x + 1 < w {
        out[n] = (x + 1, y);
        n += 1;
    }
    if y > 0 {
        out[n] = (x, y - 1);
        n += 1;
    }
    if y + 1 < h {
        out[n] = (x, y + 1);
        n += 1;
    }
    out.into_iter().take(n)
}

/// Renumbers non-zero labels to 1..=count in order of first appearance.
fn relabel(data: Vec<u32>, w: usize, h: usize) -> Labels {
    let mut map = std::collections::HashMap::new();
    let data: Vec<u32> = data
        .into_iter()
        .map(|l| {
            if l == 0 {
                0
            } else {
                let next = map.len() as u32 + 1;
                *map.entry(l).or_insert(next)
            }
        })
        .collect();
    Labels {
        width: w,
        height: h,
        data,
        count: map.len() as u32,
    }
}

/// Clears rows at or below every separation line, then keeps the connected
/// pieces of each region whose area is at least `min_region_size`. Output
/// is 0 or `class_id`.
pub fn region_filter(labels: &Labels, cfg: &LabelerConfig) -> Mask {
    let (w, h) = (labels.width, labels.height);
    let cut = cfg.separation_y.iter().copied().min().unwrap_or(h).min(h);
    let pieces = components_by_key(w, h, |i| if i / w < cut { labels.data[i] } else { 0 });
    let mut area = vec![0usize; pieces.count as usize + 1];
    for &p in &pieces.data {
        area[p as usize] += 1;
    }
    let data = pieces
        .data
        .iter()
        .map(|&p| if p != 0 && area[p as usize] >= cfg.min_region_size { cfg.class_id } else { 0 })
        .collect();
    Mask { width: w, height: h, data }
}

/// Mask for one frame given the averaged background.
pub fn label_frame(frame: &GrayImage, background: &GrayImage, cfg: &LabelerConfig) -> Result<Mask> {
    let enhanced = subtract_enhance(frame, background, cfg)?;
    let binary = adaptive_threshold(&enhanced, cfg.thresh_block, cfg.thresh_offset)?;
    let labels = watershed_refine(&enhanced, &binary)?;
    Ok(region_filter(&labels, cfg))
}

/// Masks for every frame; frames are processed in parallel.
pub fn run_pipeline(backgrounds: &[GrayImage], frames: &[GrayImage], cfg: &LabelerConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let background = average_background(backgrounds)?;
    if let Some(bad) = frames.iter().position(|f| !f.same_size(&background)) {
        return Err(Error::Input(format!("frame {bad} differs in size from the background")));
    }
    frames.par_iter().map(|f| label_frame(f, &background, cfg)).collect()
}

/// PNG files in `dir`, ordered by the number embedded in each file name
/// (then by name), so `frame_2.png` precedes `frame_10.png`.
pub fn numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    let key = |p: &PathBuf| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
        (digits.parse::<u64>().ok(), stem)
    };
    files.sort_by_key(key);
    if files.is_empty() {
        return Err(Error::Input(format!("no PNG frames in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<(Vec<PathBuf>, Vec<GrayImage>)> {
    let files = numbered_pngs(dir)?;
    let frames = files.iter().map(|p| GrayImage::load_png(p)).collect::<Result<_>>()?;
    Ok((files, frames))
}
