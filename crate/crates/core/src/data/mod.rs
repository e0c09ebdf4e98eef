//! Synthetic shape scenes with fine, coarse and category labels.
//!
//! Each image is a solid low-saturation background (class 0) with 3–8 opaque
//! rectangles, circles and triangles painted on top. Every foreground class
//! has a fixed saturated base colour; instances get a small per-channel
//! jitter. Category labels apply a fixed class→category table, and coarse
//! maps are 8×-block majority votes upsampled back by nearest neighbour.

mod pnm;
mod store;

pub use pnm::{load_pgm, load_ppm, read_pgm, read_ppm, save_pgm, save_ppm, write_pgm, write_ppm};
pub use store::{load_dataset, load_meta, save_dataset, DatasetMeta, META_FILE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::IGNORE_INDEX;
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

/// Side of the square blocks used for coarse labels.
pub const COARSE_FACTOR: usize = 8;

/// Minimum share of all pixels each class must cover in a generated dataset.
pub const MIN_CLASS_FRACTION: f64 = 0.005;

/// Integer label map, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Self { height, width, data }
    }

    /// Majority vote over `factor × factor` blocks (ties to the smaller
    /// label), replicated back to full resolution.
    pub fn coarsen(&self, factor: usize) -> Self {
        let mut out = self.clone();
        let mut counts = [0u32; 256];
        for by in (0..self.height).step_by(factor) {
            for bx in (0..self.width).step_by(factor) {
                counts.fill(0);
                let (y1, x1) = ((by + factor).min(self.height), (bx + factor).min(self.width));
                for y in by..y1 {
                    for x in bx..x1 {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let winner = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap() as u8;
                for y in by..y1 {
                    out.data[y * self.width + bx..y * self.width + x1].fill(winner);
                }
            }
        }
        out
    }

    /// `[H, W]` float tensor of the labels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(vec![self.height, self.width], self.data.iter().map(|&v| v as f32).collect())
    }
}

/// One dataset item. Images are `[3, H, W]` with values in 0..=255.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub fine: LabelMap,
    pub coarse: LabelMap,
    pub category: LabelMap,
    pub coarse_category: LabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.fine.height
    }

    pub fn width(&self) -> usize {
        self.fine.width
    }

    /// Mirror the image and every label map about the vertical axis.
    pub fn hflip(&self) -> Self {
        Self {
            clean: hflip_image(&self.clean),
            noisy: hflip_image(&self.noisy),
            fine: self.fine.hflip(),
            coarse: self.coarse.hflip(),
            category: self.category.hflip(),
            coarse_category: self.coarse_category.hflip(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            clean: crop_image(&self.clean, top, left, height, width),
            noisy: crop_image(&self.noisy, top, left, height, width),
            fine: self.fine.crop(top, left, height, width),
            coarse: self.coarse.crop(top, left, height, width),
            category: self.category.crop(top, left, height, width),
            coarse_category: self.coarse_category.crop(top, left, height, width),
        }
    }
}

/// Flip with probability 0.5, image and labels together.
pub fn random_hflip(sample: &Sample, rng: &mut Rng) -> Sample {
    random_hflip_p(sample, 0.5, rng)
}

pub fn random_hflip_p(sample: &Sample, p: f64, rng: &mut Rng) -> Sample {
    if rng.coin(p) {
        sample.hflip()
    } else {
        sample.clone()
    }
}

fn image_dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    let n = s.len();
    (s[n - 3], s[n - 2], s[n - 1])
}

pub fn hflip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let (_, _, w) = image_dims(image);
    let mut data = Vec::with_capacity(image.numel());
    for row in image.data().chunks_exact(w) {
        data.extend(row.iter().rev());
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

pub fn crop_image(image: &Tensor<f32>, top: usize, left: usize, height: usize, width: usize) -> Tensor<f32> {
    let (c, h, w) = image_dims(image);
    let mut data = Vec::with_capacity(c * height * width);
    for plane in image.data().chunks_exact(h * w) {
        for y in top..top + height {
            data.extend_from_slice(&plane[y * w + left..y * w + left + width]);
        }
    }
    Tensor::from_parts(vec![c, height, width], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation on the 0..255 intensity scale.
    pub sigma: f64,
    pub seed: u64,
}

/// `n` draws of `N(0, σ²)` from the noise stream of `spec.seed`.
pub fn gaussian_noise(n: usize, spec: &NoiseSpec) -> Result<Vec<f64>> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", spec.sigma)));
    }
    let mut rng = Rng::derived(spec.seed, stream::NOISE);
    Ok((0..n).map(|_| rng.normal() * spec.sigma).collect())
}

/// Add zero-mean Gaussian noise and clamp to `[0, 255]`.
pub fn add_gaussian_noise(image: &Tensor<f32>, spec: &NoiseSpec) -> Result<Tensor<f32>> {
    let noise = gaussian_noise(image.numel(), spec)?;
    if spec.sigma == 0.0 {
        return Ok(image.clone());
    }
    let data = image
        .data()
        .iter()
        .zip(noise)
        .map(|(&v, n)| (v as f64 + n).clamp(0.0, 255.0) as f32)
        .collect();
    Ok(Tensor::from_parts(image.shape().to_vec(), data))
}

/// Per-channel normalisation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Population mean and std per channel over `[3, H, W]` images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let (c, h, w) = image_dims(img);
            if c != 3 {
                return Err(Error::shape(format!("expected 3 channels, got {c}")));
            }
            for (ch, plane) in img.data().chunks_exact(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::invalid("no images to compute statistics from"));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        Ok(Self { mean, std })
    }

    fn check(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("normalisation std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }

    /// `(x − mean) / std` per channel; the channel axis is third from last.
    pub fn normalize(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check()?;
        self.per_channel(image, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check()?;
        self.per_channel(image, |v, m, s| v * s + m)
    }

    fn per_channel(&self, image: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f32>> {
        let (c, h, w) = image_dims(image);
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let mut out = image.clone();
        for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = i % 3;
            for v in plane {
                *v = f(*v as f64, self.mean[ch], self.std[ch]) as f32;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub n_categories: usize,
    pub seed: u64,
    pub sigma: f64,
    /// Training crop `[H, W]`; `None` trains on full images.
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
}

fn default_flip_prob() -> f64 {
    0.5
}

impl DataConfig {
    pub fn new(n_samples: usize, size: usize, n_classes: usize, n_categories: usize, seed: u64, sigma: f64) -> Self {
        Self {
            n_samples,
            height: size,
            width: size,
            n_classes,
            n_categories,
            seed,
            sigma,
            crop: None,
            flip_prob: 0.5,
        }
    }

    /// Spatial size the network sees during training.
    pub fn train_dims(&self) -> [usize; 2] {
        self.crop.unwrap_or([self.height, self.width])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes (class 0 is background)"));
        }
        if self.n_classes >= IGNORE_INDEX {
            return Err(Error::invalid(format!("at most {} classes", IGNORE_INDEX - 1)));
        }
        if self.n_categories == 0 || self.n_categories > self.n_classes {
            return Err(Error::invalid("n_categories must be in 1..=n_classes"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability must be in [0, 1]"));
        }
        let [ch, cw] = self.train_dims();
        if ch > self.height || cw > self.width {
            return Err(Error::invalid(format!(
                "crop {ch}x{cw} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        if ch % 16 != 0 || cw % 16 != 0 {
            return Err(Error::invalid(format!(
                "training size {ch}x{cw} must have H and W divisible by 16"
            )));
        }
        Ok(())
    }
}

/// Class 0 (background) is category 0; foreground classes are dealt round
/// robin over the remaining categories.
pub fn class_to_category(n_classes: usize, n_categories: usize) -> Vec<u8> {
    (0..n_classes)
        .map(|c| {
            if c == 0 || n_categories == 1 {
                0
            } else {
                (1 + (c - 1) % (n_categories - 1)) as u8
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub class_to_category: Vec<u8>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Statistics over the clean images.
    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::from_images(self.samples.iter().map(|s| &s.clean))
    }

    /// Pixel count per fine class.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.config.n_classes];
        for s in &self.samples {
            for &l in &s.fine.data {
                if (l as usize) < hist.len() {
                    hist[l as usize] += 1;
                }
            }
        }
        hist
    }
}

/// Saturated base colour of a foreground class (golden-ratio hue walk).
pub fn class_color(class: usize) -> [f64; 3] {
    let hue = ((class as f64 - 1.0) * 0.618_033_988_75).fract() * 6.0;
    let value = if class % 2 == 1 { 230.0 } else { 170.0 };
    let sat = 0.85;
    let c = value * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn random(h: usize, w: usize, rng: &mut Rng) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let side = hf.min(wf);
        match rng.below(3) {
            0 => {
                let (rh, rw) = (hf * (0.15 + 0.3 * rng.uniform()), wf * (0.15 + 0.3 * rng.uniform()));
                let (y0, x0) = (rng.uniform() * (hf - rh), rng.uniform() * (wf - rw));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rh,
                    x1: x0 + rw,
                }
            }
            1 => Shape::Circle {
                cy: rng.uniform() * hf,
                cx: rng.uniform() * wf,
                r: side * (0.08 + 0.14 * rng.uniform()),
            },
            _ => {
                let (cy, cx) = (rng.uniform() * hf, rng.uniform() * wf);
                let span = side * (0.2 + 0.25 * rng.uniform());
                let mut pts = [(0.0, 0.0); 3];
                for p in &mut pts {
                    *p = (cy + (rng.uniform() - 0.5) * span * 2.0, cx + (rng.uniform() - 0.5) * span * 2.0);
                }
                Shape::Triangle { pts }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [cross(pts[0], pts[1]), cross(pts[1], pts[2]), cross(pts[2], pts[0])];
                let neg = d.iter().any(|&v| v < 0.0);
                let pos = d.iter().any(|&v| v > 0.0);
                !(neg && pos)
            }
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize, rng: &mut Rng) -> Self {
        let gray = 40.0 + 175.0 * rng.uniform();
        let bg: Vec<f64> = (0..3).map(|_| (gray + (rng.uniform() - 0.5) * 30.0).clamp(0.0, 255.0)).collect();
        let mut rgb = vec![0.0; 3 * h * w];
        for c in 0..3 {
            rgb[c * h * w..(c + 1) * h * w].fill(bg[c]);
        }
        Self {
            h,
            w,
            rgb,
            labels: vec![0; h * w],
        }
    }

    fn paint(&mut self, class: usize, rng: &mut Rng) {
        let shape = Shape::random(self.h, self.w, rng);
        let base = class_color(class);
        let color: Vec<f64> = base.iter().map(|&v| (v + (rng.uniform() - 0.5) * 40.0).clamp(0.0, 255.0)).collect();
        let hw = self.h * self.w;
        for y in 0..self.h {
            for x in 0..self.w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    let i = y * self.w + x;
                    self.labels[i] = class as u8;
                    for c in 0..3 {
                        self.rgb[c * hw + i] = color[c];
                    }
                }
            }
        }
    }
}

/// Generate a dataset; a pure function of `config`.
pub fn gen_synthetic(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let table = class_to_category(config.n_classes, config.n_categories);
    let data_seed = derive_seed(config.seed, stream::DATA);

    let mut canvases: Vec<Canvas> = (0..config.n_samples)
        .map(|i| {
            let mut rng = Rng::derived(data_seed, i as u64);
            let mut canvas = Canvas::new(h, w, &mut rng);
            let shapes = 3 + rng.below(6);
            for _ in 0..shapes {
                let class = 1 + rng.below(config.n_classes - 1);
                canvas.paint(class, &mut rng);
            }
            canvas
        })
        .collect();

    // Repaint under-represented classes until each covers MIN_CLASS_FRACTION
    // of all pixels, for at most `8 * n * classes` rounds.
    if !canvases.is_empty() {
        let total = (canvases.len() * h * w) as f64;
        let mut repair = Rng::derived(data_seed, u64::MAX);
        let max_rounds = 8 * canvases.len() * config.n_classes;
        for _ in 0..max_rounds {
            let mut hist = vec![0u64; config.n_classes];
            for c in &canvases {
                for &l in &c.labels {
                    hist[l as usize] += 1;
                }
            }
            let Some(class) = (1..config.n_classes).find(|&c| (hist[c] as f64) < MIN_CLASS_FRACTION * total) else {
                break;
            };
            let target = repair.below(canvases.len());
            canvases[target].paint(class, &mut repair);
        }
    }

    let samples = canvases
        .into_iter()
        .enumerate()
        .map(|(i, canvas)| {
            let clean = Tensor::from_parts(vec![3, h, w], canvas.rgb.iter().map(|v| v.round() as f32).collect());
            let spec = NoiseSpec {
                sigma: config.sigma,
                seed: derive_seed(config.seed, 0x1000 + i as u64),
            };
            // Noisy images are quantised to u8 values.
            let noisy = add_gaussian_noise(&clean, &spec)?.map(|v| v.round());
            let fine = LabelMap {
                height: h,
                width: w,
                data: canvas.labels,
            };
            let category = fine.map(|l| table[l as usize]);
            Ok(Sample {
                coarse: fine.coarsen(COARSE_FACTOR),
                coarse_category: category.coarsen(COARSE_FACTOR),
                clean,
                noisy,
                fine,
                category,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        config: config.clone(),
        class_to_category: table,
        samples,
    })
}
