//! Synthetic inspection dataset: one canonical shape on a textured background
//! with pose and color jitter, and abnormal variants carrying a single local
//! defect.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Label, ManifestEntry};
use crate::augment::{ops, Rect};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub const SYNTH_FILE: &str = "synth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectFamily {
    /// A rectangle of foreign striped texture.
    Paste,
    /// A thin rotated line of contrasting color.
    Scar,
    /// A strongly blurred rectangle.
    Blur,
    /// One of the above, chosen per image.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub image_size: usize,
    pub shape: ShapeFamily,
    pub defect: DefectFamily,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_normal: 105,
            n_abnormal: 100,
            image_size: 32,
            shape: ShapeFamily::Circle,
            defect: DefectFamily::Paste,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "synthetic image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub id: String,
    pub defect: DefectFamily,
    /// Box containing every pixel the defect changed.
    pub region: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub normals: Vec<String>,
    pub defects: Vec<DefectRecord>,
}

/// Per-channel color jitter of normals; a global gain varies by four times this.
const COLOR_JITTER: f64 = 0.08;

fn jitter(rng: &mut Rng, amount: f64) -> f64 {
    rng.random_range(-amount..=amount)
}

fn inside_shape(shape: ShapeFamily, u: f64, v: f64, r: f64) -> bool {
    match shape {
        ShapeFamily::Circle => u * u + v * v <= r * r,
        ShapeFamily::Square => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
        ShapeFamily::Triangle => {
            // apex up at v = -r, base at v = r/2, circumradius r
            let t = (v + r) / (1.5 * r);
            (0.0..=1.0).contains(&t) && u.abs() <= t * r * 3f64.sqrt() / 2.0
        }
    }
}

/// One normal image drawn from `rng`.
pub fn render_normal(spec: &SynthSpec, rng: &mut Rng) -> Image {
    let s = spec.image_size as f64;
    let gain = 1.0 + jitter(rng, 4.0 * COLOR_JITTER);
    let bg = [0.35, 0.45, 0.40].map(|b| b + jitter(rng, COLOR_JITTER));
    let fg = [0.85, 0.60, 0.20].map(|f| f + jitter(rng, COLOR_JITTER));
    let theta = (45.0 + jitter(rng, 10.0)).to_radians();
    let period = 6.0 * s / 32.0;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let cy = s / 2.0 + jitter(rng, 0.08 * s);
    let cx = s / 2.0 + jitter(rng, 0.08 * s);
    let radius = 0.28 * s * (1.0 + jitter(rng, 0.06));
    let rot = jitter(rng, 20.0).to_radians();
    let (sin_r, cos_r) = rot.sin_cos();
    let noise: Vec<f64> = (0..spec.image_size * spec.image_size)
        .map(|_| jitter(rng, 0.02))
        .collect();
    Image::from_fn(3, spec.image_size, spec.image_size, |c, y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let stripe = (std::f64::consts::TAU * (px * theta.cos() + py * theta.sin()) / period + phase).sin();
        let back = bg[c] + 0.05 * stripe + noise[y * spec.image_size + x];
        // 2×2 supersampling for soft edges
        let mut cover = 0.0;
        for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
            let (dy, dx) = (py + oy - cy, px + ox - cx);
            let u = dx * cos_r + dy * sin_r;
            let v = -dx * sin_r + dy * cos_r;
            if inside_shape(spec.shape, u, v, radius) {
                cover += 0.25;
            }
        }
        (gain * ((1.0 - cover) * back + cover * fg[c])).clamp(0.0, 1.0) as f32
    })
}

fn random_rect(size: usize, rng: &mut Rng) -> Rect {
    let lo = ((0.15 * size as f64).round() as usize).max(2);
    let hi = ((0.3 * size as f64).round() as usize).max(lo);
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    Rect {
        y: rng.random_range(0..=size - h),
        x: rng.random_range(0..=size - w),
        h,
        w,
    }
}

/// Adds one defect of `family` (not `Mixed`) and returns its bounding box.
fn add_defect(img: &mut Image, family: DefectFamily, rng: &mut Rng) -> Rect {
    let size = img.height();
    match family {
        DefectFamily::Paste | DefectFamily::Mixed => {
            let r = random_rect(size, rng);
            let period = rng.random_range(2.0..4.0);
            let vertical = rng.random::<bool>();
            for c in 0..3 {
                for y in r.y..r.y + r.h {
                    for x in r.x..r.x + r.w {
                        let t = if vertical { x } else { y } as f64;
                        let stripe = 0.5 + 0.5 * (std::f64::consts::TAU * t / period).sin();
                        let delta = (0.35 + 0.15 * stripe) as f32;
                        let v = img.get(c, y, x);
                        img.set(c, y, x, if v < 0.5 { v + delta } else { v - delta });
                    }
                }
            }
            r
        }
        DefectFamily::Scar => {
            let s = size as f64;
            let scar = crate::augment::Scar {
                cy: rng.random_range(0.2 * s..0.8 * s),
                cx: rng.random_range(0.2 * s..0.8 * s),
                length: rng.random_range(0.4 * s..0.7 * s),
                width: (s / 16.0).max(1.5),
                angle_deg: rng.random_range(-90.0..90.0),
                color: if rng.random::<bool>() { [0.05; 3] } else { [0.97; 3] },
            };
            let (mut y0, mut x0, mut y1, mut x1) = (size, size, 0, 0);
            for y in 0..size {
                for x in 0..size {
                    if scar.covers(y, x) {
                        for c in 0..3 {
                            img.set(c, y, x, scar.color[c]);
                        }
                        (y0, x0, y1, x1) = (y0.min(y), x0.min(x), y1.max(y), x1.max(x));
                    }
                }
            }
            Rect {
                y: y0,
                x: x0,
                h: y1 + 1 - y0,
                w: x1 + 1 - x0,
            }
        }
        DefectFamily::Blur => {
            let r = random_rect(size, rng);
            let sigma = 1.5 * size as f64 / 32.0;
            let blurred = ops::gaussian_blur(img, ops::kernel_for_sigma(sigma), sigma);
            for c in 0..3 {
                for y in r.y..r.y + r.h {
                    for x in r.x..r.x + r.w {
                        img.set(c, y, x, blurred.get(c, y, x));
                    }
                }
            }
            r
        }
    }
}

/// The `index`-th abnormal sample: its defect-free twin, the defective image
/// and the defect record (with an empty id).
pub fn render_abnormal(spec: &SynthSpec, index: usize) -> (Image, Image, DefectRecord) {
    let mut rng = rng::stream(spec.seed, "synth-abnormal", index as u64);
    let normal = render_normal(spec, &mut rng);
    let family = match spec.defect {
        DefectFamily::Mixed => [DefectFamily::Paste, DefectFamily::Scar, DefectFamily::Blur][rng.random_range(0..3)],
        f => f,
    };
    let mut bad = normal.clone();
    let region = add_defect(&mut bad, family, &mut rng);
    (
        normal,
        bad,
        DefectRecord {
            id: String::new(),
            defect: family,
            region,
        },
    )
}

fn family_name(f: DefectFamily) -> &'static str {
    match f {
        DefectFamily::Paste => "paste",
        DefectFamily::Scar => "scar",
        DefectFamily::Blur => "blur",
        DefectFamily::Mixed => "mixed",
    }
}

/// Renders the dataset into `out/{normal,abnormal}` as PNG and writes
/// `synth.json` with the defect locations.
pub fn synth_dataset(spec: &SynthSpec, out: &Path) -> Result<(DatasetManifest, SynthTruth)> {
    spec.validate()?;
    for sub in ["normal", "abnormal"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(spec.n_normal + spec.n_abnormal);
    let mut truth = SynthTruth {
        spec: spec.clone(),
        normals: Vec::new(),
        defects: Vec::new(),
    };
    for i in 0..spec.n_normal {
        let img = render_normal(spec, &mut rng::stream(spec.seed, "synth-normal", i as u64));
        let id = format!("normal/normal_{i:04}.png");
        img.save_png(&out.join(&id))?;
        truth.normals.push(id.clone());
        entries.push(ManifestEntry {
            id,
            label: Label::Normal,
            group: String::new(),
        });
    }
    for i in 0..spec.n_abnormal {
        let (_, bad, mut record) = render_abnormal(spec, i);
        let id = format!("abnormal/{}_{i:04}.png", family_name(record.defect));
        bad.save_png(&out.join(&id))?;
        record.id = id.clone();
        truth.defects.push(record);
        entries.push(ManifestEntry {
            id,
            label: Label::Abnormal,
            group: String::new(),
        });
    }
    let path = out.join(SYNTH_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&truth)?).map_err(|e| Error::io(&path, e))?;
    Ok((
        DatasetManifest {
            root: out.to_path_buf(),
            entries,
            image_size: Some((spec.image_size, spec.image_size)),
        },
        truth,
    ))
}
