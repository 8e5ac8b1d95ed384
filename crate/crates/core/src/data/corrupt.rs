//! Lightweight image corruptions and the corruption-as-anomaly protocol.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Label, ManifestEntry};
use crate::augment::ops;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub const CORRUPTIONS: [&str; 9] = [
    "gaussian-noise",
    "gaussian-blur",
    "fog",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg",
    "elastic",
    "saturate",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub types: Vec<String>,
    /// Severity level 1..=5.
    pub severity: u8,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            types: CORRUPTIONS.iter().map(|s| s.to_string()).collect(),
            severity: 4,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Config("corruption list must not be empty".into()));
        }
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity {} outside 1..=5", self.severity)));
        }
        if let Some(bad) = self.types.iter().find(|t| !CORRUPTIONS.contains(&t.as_str())) {
            return Err(Error::Config(format!(
                "unknown corruption `{bad}`; known: {}",
                CORRUPTIONS.join(", ")
            )));
        }
        Ok(())
    }
}

/// Smooth random field in `[0, 1]`: a coarse uniform grid upsampled
/// bilinearly.
fn smooth_field(h: usize, w: usize, cells: usize, rng: &mut Rng) -> Image {
    let coarse = Image::from_fn(1, cells, cells, |_, _, _| rng.random::<f32>());
    coarse.resize(h, w)
}

fn pixelate(img: &Image, factor: f64) -> Image {
    let sh = ((img.height() as f64 * factor).round() as usize).max(1);
    let sw = ((img.width() as f64 * factor).round() as usize).max(1);
    let small = img.resize(sh, sw);
    Image::from_fn(img.channels(), img.height(), img.width(), |c, y, x| {
        small.get(c, y * sh / img.height(), x * sw / img.width())
    })
}

/// Block-mean smoothing plus level quantization, imitating coarse block
/// compression.
fn blocky(img: &Image, block: usize, levels: f32) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        for by in (0..img.height()).step_by(block) {
            for bx in (0..img.width()).step_by(block) {
                let ys = by..(by + block).min(img.height());
                let xs = bx..(bx + block).min(img.width());
                let n = (ys.len() * xs.len()) as f32;
                let mean = ys
                    .clone()
                    .flat_map(|y| xs.clone().map(move |x| (y, x)))
                    .map(|(y, x)| img.get(c, y, x))
                    .sum::<f32>()
                    / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let v = 0.5 * img.get(c, y, x) + 0.5 * mean;
                        out.set(c, y, x, (v * levels).round() / levels);
                    }
                }
            }
        }
    }
    out.clamp_unit();
    out
}

/// Applies corruption `name` at `severity` (1..=5).
pub fn corrupt(name: &str, img: &Image, severity: u8, rng: &mut Rng) -> Result<Image> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside 1..=5")));
    }
    let s = usize::from(severity - 1);
    let scale = img.height().min(img.width()) as f64 / 32.0;
    let mut out = img.clone();
    match name {
        "gaussian-noise" => {
            let sigma = [0.04, 0.06, 0.08, 0.09, 0.10][s];
            let dist = Normal::new(0.0f32, sigma).expect("positive sigma");
            for v in out.data_mut() {
                *v += dist.sample(rng);
            }
            out.clamp_unit();
        }
        "gaussian-blur" => {
            let sigma = [0.4, 0.6, 0.7, 0.8, 1.0][s] * scale;
            out = ops::gaussian_blur(img, ops::kernel_for_sigma(sigma), sigma);
        }
        "fog" => {
            let amount = [0.2f32, 0.3, 0.4, 0.5, 0.6][s];
            let haze = smooth_field(img.height(), img.width(), 4, rng);
            for c in 0..img.channels() {
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        let f = amount * (0.6 + 0.4 * haze.get(0, y, x));
                        out.set(c, y, x, (1.0 - f) * img.get(c, y, x) + f);
                    }
                }
            }
        }
        "brightness" => {
            let shift = [0.1f32, 0.2, 0.3, 0.4, 0.5][s];
            for v in out.data_mut() {
                *v = (*v + shift).min(1.0);
            }
        }
        "contrast" => ops::adjust_contrast(&mut out, [0.75, 0.5, 0.4, 0.3, 0.15][s]),
        "pixelate" => out = pixelate(img, [0.95, 0.9, 0.85, 0.75, 0.65][s]),
        "jpeg" => out = blocky(img, [2, 2, 4, 4, 8][s], [24.0, 16.0, 12.0, 8.0, 6.0][s]),
        "elastic" => {
            let alpha = [0.5, 0.75, 1.0, 1.25, 1.5][s] * scale;
            let dx = smooth_field(img.height(), img.width(), 5, rng);
            let dy = smooth_field(img.height(), img.width(), 5, rng);
            let (my, mx) = (img.height() as f64 - 1.0, img.width() as f64 - 1.0);
            out = Image::from_fn(img.channels(), img.height(), img.width(), |c, y, x| {
                let sy = (y as f64 + alpha * (2.0 * f64::from(dy.get(0, y, x)) - 1.0)).clamp(0.0, my);
                let sx = (x as f64 + alpha * (2.0 * f64::from(dx.get(0, y, x)) - 1.0)).clamp(0.0, mx);
                img.sample_bilinear(c, sy as f32, sx as f32, 0.0)
            });
        }
        "saturate" => ops::adjust_saturation(&mut out, [0.3, 0.1, 2.0, 5.0, 20.0][s]),
        other => {
            return Err(Error::Config(format!(
                "unknown corruption `{other}`; known: {}",
                CORRUPTIONS.join(", ")
            )))
        }
    }
    Ok(out)
}

/// Builds a test set in `out`: each clean image copied to `normal/` and, for
/// every corruption type, a corrupted copy under `abnormal/<type>/`.
///
/// `corrupt_fn(name, image, severity, rng)` performs the corruption; pass
/// [`corrupt`] for the built-in set.
pub fn build_corruption_protocol<F>(
    clean: &DatasetManifest,
    spec: &CorruptionSpec,
    mut corrupt_fn: F,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest>
where
    F: FnMut(&str, &Image, u8, &mut Rng) -> Result<Image>,
{
    spec.validate()?;
    if clean.entries.iter().any(|e| e.label != Label::Normal) {
        return Err(Error::Data("corruption protocol expects clean normal images only".into()));
    }
    let mut entries = Vec::new();
    let write = |rel: &str, img: &Image| -> Result<()> {
        let path = out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.save_png(&path)
    };
    let stem = |id: &str| -> String {
        let name = id.rsplit('/').next().unwrap_or(id);
        let base = name.rsplit_once('.').map_or(name, |(b, _)| b);
        format!("{base}.png")
    };
    for (i, e) in clean.entries.iter().enumerate() {
        let img = clean.load(&e.id)?;
        let name = format!("{i:05}_{}", stem(&e.id));
        let rel = format!("normal/{name}");
        write(&rel, &img)?;
        entries.push(ManifestEntry {
            id: rel,
            label: Label::Normal,
            group: String::new(),
        });
        for (t, kind) in spec.types.iter().enumerate() {
            let mut r = rng::stream(seed, kind, (i * spec.types.len() + t) as u64);
            let bad = corrupt_fn(kind, &img, spec.severity, &mut r)?;
            let rel = format!("abnormal/{kind}/{name}");
            write(&rel, &bad)?;
            entries.push(ManifestEntry {
                id: rel,
                label: Label::Abnormal,
                group: kind.clone(),
            });
        }
    }
    entries.sort_by(|a, b| (a.label != Label::Normal, &a.id).cmp(&(b.label != Label::Normal, &b.id)));
    Ok(DatasetManifest {
        root: out.to_path_buf(),
        entries,
        image_size: clean.image_size,
    })
}
