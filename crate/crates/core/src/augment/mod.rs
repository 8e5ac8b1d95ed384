//! Positive augmentations that mimic benign variation, negative augmentations
//! that synthesize pseudo-anomalies, and training batch assembly.

pub mod ops;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

/// One step of a positive recipe, applied with probability `prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PositiveTransform {
    RandomAffine {
        prob: f64,
        /// Rotation range in degrees.
        degrees: (f64, f64),
        /// Maximum absolute shift as a fraction of width and height.
        translate: (f64, f64),
        scale: (f64, f64),
    },
    ColorJitter {
        prob: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    GaussianBlur {
        prob: f64,
        /// Odd kernel side in pixels.
        kernel: usize,
        sigma: (f64, f64),
    },
    Grayscale {
        prob: f64,
    },
}

impl PositiveTransform {
    pub fn prob(&self) -> f64 {
        match self {
            Self::RandomAffine { prob, .. }
            | Self::ColorJitter { prob, .. }
            | Self::GaussianBlur { prob, .. }
            | Self::Grayscale { prob } => *prob,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let p = self.prob();
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("transform probability {p} outside [0, 1]"));
        }
        match *self {
            Self::RandomAffine {
                degrees,
                translate,
                scale,
                ..
            } => {
                if degrees.0 > degrees.1 || !(-360.0..=360.0).contains(&degrees.0) || degrees.1 > 360.0 {
                    return bad(format!("affine degrees {degrees:?} must be an ordered range in [-360, 360]"));
                }
                if !(0.0..=1.0).contains(&translate.0) || !(0.0..=1.0).contains(&translate.1) {
                    return bad(format!("affine translate {translate:?} must lie in [0, 1]"));
                }
                if !(scale.0 > 0.0 && scale.0 <= scale.1) {
                    return bad(format!("affine scale {scale:?} must be an ordered positive range"));
                }
            }
            Self::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                ..
            } => {
                for (n, v) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
                    if !(0.0..=1.0).contains(&v) {
                        return bad(format!("jitter {n} {v} outside [0, 1]"));
                    }
                }
                if !(0.0..=0.5).contains(&hue) {
                    return bad(format!("jitter hue {hue} outside [0, 0.5]"));
                }
            }
            Self::GaussianBlur { kernel, sigma, .. } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return bad(format!("blur kernel {kernel} must be odd"));
                }
                if !(sigma.0 >= 0.0 && sigma.0 <= sigma.1) {
                    return bad(format!("blur sigma {sigma:?} must be an ordered non-negative range"));
                }
            }
            Self::Grayscale { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivePolicy {
    pub recipe: Vec<PositiveTransform>,
}

fn sample_range(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl PositivePolicy {
    /// A recipe that never fires.
    pub fn identity() -> Self {
        Self {
            recipe: vec![PositiveTransform::Grayscale { prob: 0.0 }],
        }
    }

    /// Affine plus color jitter, for natural images with diverse normals.
    pub fn natural() -> Self {
        Self {
            recipe: vec![default_affine(), default_jitter()],
        }
    }

    /// Affine only, for corruption-as-anomaly protocols.
    pub fn corruption_protocol() -> Self {
        Self {
            recipe: vec![default_affine()],
        }
    }

    /// Affine, blur and grayscale, for industrial inspection images.
    pub fn industrial() -> Self {
        Self {
            recipe: vec![
                default_affine(),
                PositiveTransform::GaussianBlur {
                    prob: 0.5,
                    kernel: 5,
                    sigma: (0.1, 1.0),
                },
                PositiveTransform::Grayscale { prob: 0.2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipe.is_empty() {
            return Err(Error::Config("positive recipe must not be empty".into()));
        }
        self.recipe.iter().try_for_each(PositiveTransform::validate)
    }

    /// Applies the recipe in order; each step fires with its own probability.
    pub fn apply(&self, image: &Image, rng: &mut Rng) -> Image {
        let mut out = image.clone();
        for t in &self.recipe {
            let fire = rng.random::<f64>() < t.prob();
            if !fire {
                continue;
            }
            match *t {
                PositiveTransform::RandomAffine {
                    degrees,
                    translate,
                    scale,
                    ..
                } => {
                    let angle = sample_range(rng, degrees);
                    let max_dx = translate.0 * out.width() as f64;
                    let max_dy = translate.1 * out.height() as f64;
                    let dx = sample_range(rng, (-max_dx, max_dx));
                    let dy = sample_range(rng, (-max_dy, max_dy));
                    let s = sample_range(rng, scale);
                    out = ops::affine(&out, angle, dx, dy, s);
                }
                PositiveTransform::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                    ..
                } => {
                    let b = sample_range(rng, (1.0 - brightness, 1.0 + brightness));
                    let c = sample_range(rng, (1.0 - contrast, 1.0 + contrast));
                    let s = sample_range(rng, (1.0 - saturation, 1.0 + saturation));
                    let h = sample_range(rng, (-hue, hue));
                    ops::adjust_brightness(&mut out, b as f32);
                    ops::adjust_contrast(&mut out, c as f32);
                    ops::adjust_saturation(&mut out, s as f32);
                    ops::adjust_hue(&mut out, h as f32);
                }
                PositiveTransform::GaussianBlur { kernel, sigma, .. } => {
                    let s = sample_range(rng, sigma);
                    out = ops::gaussian_blur(&out, kernel, s);
                }
                PositiveTransform::Grayscale { .. } => ops::grayscale(&mut out),
            }
        }
        out
    }
}

fn default_affine() -> PositiveTransform {
    PositiveTransform::RandomAffine {
        prob: 1.0,
        degrees: (-10.0, 10.0),
        translate: (0.05, 0.05),
        scale: (0.95, 1.05),
    }
}

fn default_jitter() -> PositiveTransform {
    PositiveTransform::ColorJitter {
        prob: 0.8,
        brightness: 0.2,
        contrast: 0.2,
        saturation: 0.2,
        hue: 0.02,
    }
}

/// Pseudo-anomaly synthesis recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NegativePolicy {
    /// Copy a rectangle to another location of the same image.
    Cutpaste {
        /// Patch area as a fraction of the image area.
        area_range: (f64, f64),
        /// Width/height ratio, sampled log-uniformly.
        aspect_range: (f64, f64),
    },
    /// A thin rotated rectangle filled with a random color. Sizes in pixels.
    Scar {
        length_range: (f64, f64),
        width_range: (f64, f64),
        rotation_range: (f64, f64),
    },
    /// Blur, then a brightness and a contrast change by `1 ± δ` each, with
    /// `δ` uniform in the given range and a random sign.
    Corruption {
        blur_sigma: (f64, f64),
        brightness: (f64, f64),
        contrast: (f64, f64),
    },
}

impl Default for NegativePolicy {
    fn default() -> Self {
        Self::Cutpaste {
            area_range: (0.02, 0.15),
            aspect_range: (0.3, 1.0 / 0.3),
        }
    }
}

impl NegativePolicy {
    pub fn identity() -> Self {
        Self::Corruption {
            blur_sigma: (0.0, 0.0),
            brightness: (0.0, 0.0),
            contrast: (0.0, 0.0),
        }
    }

    pub fn scar() -> Self {
        Self::Scar {
            length_range: (10.0, 25.0),
            width_range: (2.0, 16.0),
            rotation_range: (-45.0, 45.0),
        }
    }

    pub fn corruption_protocol() -> Self {
        Self::Corruption {
            blur_sigma: (0.5, 1.5),
            brightness: (0.2, 0.5),
            contrast: (0.2, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        match *self {
            Self::Cutpaste {
                area_range,
                aspect_range,
            } => {
                if !(ordered(area_range) && area_range.0 > 0.0 && area_range.1 < 1.0) {
                    return Err(Error::Config(format!(
                        "cutpaste area_range {area_range:?} must satisfy 0 < lo <= hi < 1"
                    )));
                }
                if !(ordered(aspect_range) && aspect_range.0 > 0.0) {
                    return Err(Error::Config(format!(
                        "cutpaste aspect_range {aspect_range:?} must be an ordered positive range"
                    )));
                }
            }
            Self::Scar {
                length_range,
                width_range,
                rotation_range,
            } => {
                if !(ordered(length_range) && length_range.0 > 0.0)
                    || !(ordered(width_range) && width_range.0 > 0.0)
                    || !ordered(rotation_range)
                {
                    return Err(Error::Config("scar ranges must be ordered and positive".into()));
                }
            }
            Self::Corruption {
                blur_sigma,
                brightness,
                contrast,
            } => {
                for (n, r, max) in [
                    ("blur_sigma", blur_sigma, f64::INFINITY),
                    ("brightness", brightness, 1.0),
                    ("contrast", contrast, 1.0),
                ] {
                    if !(ordered(r) && r.0 >= 0.0 && r.1 <= max) {
                        return Err(Error::Config(format!("corruption {n} range {r:?} is invalid")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image, rng: &mut Rng) -> Result<Image> {
        match *self {
            Self::Cutpaste {
                area_range,
                aspect_range,
            } => Ok(cut_paste(image, area_range, aspect_range, rng)?.image),
            Self::Scar {
                length_range,
                width_range,
                rotation_range,
            } => Ok(scar(image, length_range, width_range, rotation_range, rng).0),
            Self::Corruption {
                blur_sigma,
                brightness,
                contrast,
            } => {
                let sigma = sample_range(rng, blur_sigma);
                let mut out = ops::gaussian_blur(image, ops::kernel_for_sigma(sigma), sigma);
                let mut signed = |r: (f64, f64)| {
                    let d = sample_range(rng, r);
                    if rng.random::<bool>() {
                        1.0 + d
                    } else {
                        1.0 - d
                    }
                };
                let b = signed(brightness);
                let c = signed(contrast);
                ops::adjust_brightness(&mut out, b as f32);
                ops::adjust_contrast(&mut out, c as f32);
                Ok(out)
            }
        }
    }
}

pub fn apply_positive(image: &Image, policy: &PositivePolicy, rng: &mut Rng) -> Image {
    policy.apply(image, rng)
}

pub fn apply_negative(image: &Image, policy: &NegativePolicy, rng: &mut Rng) -> Result<Image> {
    policy.apply(image, rng)
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

#[derive(Debug, Clone)]
pub struct CutPaste {
    pub image: Image,
    pub cut_box: Rect,
    pub paste_box: Rect,
}

/// Picks patch `(h, w)` with integer area inside the admissible range, closest
/// (in log space) to the sampled area and aspect ratio.
fn patch_dims(
    height: usize,
    width: usize,
    area_range: (f64, f64),
    area_target: f64,
    aspect: f64,
) -> Option<(usize, usize)> {
    let total = (height * width) as f64;
    let mut lo = (area_range.0 * total).ceil() as usize;
    let mut hi = (area_range.1 * total).floor() as usize;
    if lo > hi {
        lo = (area_range.0 * total).round() as usize;
        hi = (area_range.1 * total).round() as usize;
    }
    let lo = lo.max(1);
    if hi < lo {
        return None;
    }
    let cost = |h: usize, w: usize| {
        let a = ((h * w) as f64 / area_target).ln();
        let r = ((w as f64 / h as f64) / aspect).ln();
        a * a + r * r
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for w in 1..=width {
        let h_min = lo.div_ceil(w).max(1);
        let h_max = (hi / w).min(height);
        if h_min > h_max {
            continue;
        }
        let guesses = [
            h_min,
            h_max,
            (area_target / w as f64).round() as usize,
            (w as f64 / aspect).round() as usize,
        ];
        for h in guesses.map(|h| h.clamp(h_min, h_max)) {
            let c = cost(h, w);
            if best.is_none_or(|(bc, _, _)| c < bc) {
                best = Some((c, h, w));
            }
        }
    }
    best.map(|(_, h, w)| (h, w))
}

/// Copies a random rectangle of `image` to an independently chosen location.
///
/// The patch area fraction is sampled uniformly from `area_range` and the
/// width/height ratio log-uniformly from `aspect_range`; the realized patch
/// has integer sides with area inside the range. Every pixel outside
/// `paste_box` is bitwise unchanged.
pub fn cut_paste(
    image: &Image,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut Rng,
) -> Result<CutPaste> {
    if !(area_range.0 > 0.0 && area_range.0 <= area_range.1 && area_range.1 < 1.0) {
        return Err(Error::Domain(format!("area_range {area_range:?} must satisfy 0 < lo <= hi < 1")));
    }
    if !(aspect_range.0 > 0.0 && aspect_range.0 <= aspect_range.1) {
        return Err(Error::Domain(format!("aspect_range {aspect_range:?} must be positive and ordered")));
    }
    let (height, width) = (image.height(), image.width());
    let frac = sample_range(rng, area_range);
    let aspect = sample_range(rng, (aspect_range.0.ln(), aspect_range.1.ln())).exp();
    let target = (frac * (height * width) as f64).round().max(1.0);
    let (h, w) = patch_dims(height, width, area_range, target, aspect).ok_or_else(|| {
        Error::DegenerateInput(format!(
            "{height}x{width} image cannot host a patch with area fraction in {area_range:?}"
        ))
    })?;
    let cut_box = Rect {
        y: rng.random_range(0..=height - h),
        x: rng.random_range(0..=width - w),
        h,
        w,
    };
    let paste_box = Rect {
        y: rng.random_range(0..=height - h),
        x: rng.random_range(0..=width - w),
        h,
        w,
    };
    let mut out = image.clone();
    for c in 0..image.channels() {
        for dy in 0..h {
            for dx in 0..w {
                let v = image.get(c, cut_box.y + dy, cut_box.x + dx);
                out.set(c, paste_box.y + dy, paste_box.x + dx, v);
            }
        }
    }
    Ok(CutPaste {
        image: out,
        cut_box,
        paste_box,
    })
}

/// A rotated rectangle: center, full length along the rotated axis, full
/// width across it, angle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scar {
    pub cy: f64,
    pub cx: f64,
    pub length: f64,
    pub width: f64,
    pub angle_deg: f64,
    pub color: [f32; 3],
}

impl Scar {
    /// Whether the pixel center `(y, x)` lies inside the rectangle.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let along = dx * cos + dy * sin;
        let across = -dx * sin + dy * cos;
        along.abs() <= self.length / 2.0 && across.abs() <= self.width / 2.0
    }
}

/// Paints one thin rotated rectangle of a random color.
pub fn scar(
    image: &Image,
    length_range: (f64, f64),
    width_range: (f64, f64),
    rotation_range: (f64, f64),
    rng: &mut Rng,
) -> (Image, Scar) {
    let length = sample_range(rng, length_range);
    let width = sample_range(rng, width_range);
    let angle_deg = sample_range(rng, rotation_range);
    let cy = rng.random_range(0.0..image.height() as f64);
    let cx = rng.random_range(0.0..image.width() as f64);
    let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let shape = Scar {
        cy,
        cx,
        length,
        width,
        angle_deg,
        color,
    };
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if shape.covers(y, x) {
                for c in 0..image.channels() {
                    out.set(c, y, x, color[c.min(2)]);
                }
            }
        }
    }
    (out, shape)
}

/// One step's worth of augmented training inputs.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub view1: Vec<Image>,
    pub view2: Vec<Image>,
    pub negatives: Vec<Image>,
    pub originals: Vec<Image>,
    /// Indices into the few-shot set each row was drawn from.
    pub base_indices: Vec<usize>,
    /// Cross-instance partner of each row.
    pub pairing: Vec<usize>,
    /// Seed from which all per-row streams of this batch were split.
    pub seed: u64,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

/// Uniform permutation of `0..n` without fixed points (for `n >= 2`), by
/// rejection sampling.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Draws `batch_size` base images with replacement and augments each.
///
/// Row `i` augments with streams `view1/i`, `view2/i` and `negative/i` split
/// from a batch seed drawn from `rng`, so rows are independent of each other
/// and of evaluation order.
pub fn make_training_batch(
    fewshot: &[Image],
    batch_size: usize,
    positive: &PositivePolicy,
    negative: &NegativePolicy,
    rng: &mut Rng,
) -> Result<TrainingBatch> {
    if fewshot.is_empty() {
        return Err(Error::Data("few-shot set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let seed: u64 = rng.random();
    let base_indices: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..fewshot.len()))
        .collect();
    let pairing = derangement(batch_size, rng);
    let mut batch = TrainingBatch {
        view1: Vec::with_capacity(batch_size),
        view2: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
        originals: Vec::with_capacity(batch_size),
        base_indices,
        pairing,
        seed,
    };
    for (i, &b) in batch.base_indices.iter().enumerate() {
        let base = &fewshot[b];
        let i = i as u64;
        batch
            .view1
            .push(positive.apply(base, &mut rng::stream(seed, "view1", i)));
        batch
            .view2
            .push(positive.apply(base, &mut rng::stream(seed, "view2", i)));
        batch
            .negatives
            .push(negative.apply(base, &mut rng::stream(seed, "negative", i))?);
        batch.originals.push(base.clone());
    }
    Ok(batch)
}
