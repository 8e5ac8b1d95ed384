//! Deterministic pixel transforms. Randomness is drawn by the callers.

use crate::image::Image;

/// Affine warp about the image center: rotate by `degrees` (counter-clockwise
/// on screen), scale by `scale`, then translate by `(dx, dy)` pixels. Samples
/// bilinearly with edge replication.
pub fn affine(img: &Image, degrees: f64, dx: f64, dy: f64, scale: f64) -> Image {
    let (sin, cos) = snapped_sin_cos(degrees);
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let max_y = img.height() as f64 - 1.0;
    let max_x = img.width() as f64 - 1.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let u = (x as f64 - cx - dx) / scale;
            let v = (y as f64 - cy - dy) / scale;
            let sx = snap(cos * u - sin * v + cx).clamp(0.0, max_x);
            let sy = snap(sin * u + cos * v + cy).clamp(0.0, max_y);
            for c in 0..img.channels() {
                let val = img.sample_bilinear(c, sy as f32, sx as f32, 0.0);
                out.set(c, y, x, val);
            }
        }
    }
    out.clamp_unit();
    out
}

/// sin/cos with exact values at multiples of 90 degrees.
fn snapped_sin_cos(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        degrees.to_radians().sin_cos()
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

pub fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Multiplies every value by `factor`.
pub fn adjust_brightness(img: &mut Image, factor: f32) {
    if factor == 1.0 {
        return;
    }
    for v in img.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

/// Blends with the mean gray level: `factor·x + (1 − factor)·mean`.
pub fn adjust_contrast(img: &mut Image, factor: f32) {
    if factor == 1.0 {
        return;
    }
    let mean = if img.channels() == 3 {
        let n = img.height() * img.width();
        let mut acc = 0.0f64;
        for y in 0..img.height() {
            for x in 0..img.width() {
                acc += f64::from(luminance(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)));
            }
        }
        (acc / n as f64) as f32
    } else {
        img.data().iter().map(|v| f64::from(*v)).sum::<f64>() as f32 / img.data().len() as f32
    };
    for v in img.data_mut() {
        *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0);
    }
}

/// Blends each pixel with its own gray value.
pub fn adjust_saturation(img: &mut Image, factor: f32) {
    if factor == 1.0 || img.channels() != 3 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (r, g, b) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let l = luminance(r, g, b);
            for (c, v) in [r, g, b].into_iter().enumerate() {
                img.set(c, y, x, (factor * v + (1.0 - factor) * l).clamp(0.0, 1.0));
            }
        }
    }
}

/// Rotates hue by `shift` turns (in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Image, shift: f32) {
    if shift == 0.0 || img.channels() != 3 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (h, s, v) = rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            img.set(0, y, x, r);
            img.set(1, y, x, g);
            img.set(2, y, x, b);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Replaces RGB with its luminance in all three channels.
pub fn grayscale(img: &mut Image) {
    if img.channels() != 3 {
        return;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = luminance(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                img.set(c, y, x, l);
            }
        }
    }
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is identity.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    if sigma <= 0.0 || kernel < 2 {
        return img.clone();
    }
    let half = (kernel / 2) as isize;
    let weights: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| (w / norm) as f32).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(src.channels(), src.height(), src.width(), |c, y, x| {
            let mut acc = 0.0f32;
            for (k, wt) in weights.iter().enumerate() {
                let off = k as isize - half;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + off).clamp(0, w - 1))
                } else {
                    ((y as isize + off).clamp(0, h - 1), x as isize)
                };
                acc += wt * src.get(c, yy as usize, xx as usize);
            }
            acc
        })
    };
    let mut out = pass(&pass(img, true), false);
    out.clamp_unit();
    out
}

/// Odd kernel size covering three standard deviations.
pub fn kernel_for_sigma(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Image {
        Image::from_fn(3, side, side, |c, y, x| ((c * 31 + y * side + x) % 97) as f32 / 96.0)
    }

    #[test]
    fn quarter_turn_is_exact() {
        let img = ramp(9);
        let out = affine(&img, 90.0, 0.0, 0.0, 1.0);
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    assert_eq!(out.get(c, y, x), img.get(c, x, 8 - y));
                }
            }
        }
        assert_eq!(affine(&img, 0.0, 0.0, 0.0, 1.0), img);
        assert_eq!(affine(&img, 360.0, 0.0, 0.0, 1.0), img);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = ramp(8);
        let out = affine(&img, 0.0, 2.0, 1.0, 1.0);
        assert_eq!(out.get(1, 4, 5), img.get(1, 3, 3));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.1, 0.8, 0.4)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(3, 6, 6, 0.4);
        let out = gaussian_blur(&img, 5, 1.3);
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert_eq!(gaussian_blur(&img, 5, 0.0), img);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let mut img = ramp(4);
        grayscale(&mut img);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(img.get(0, y, x), img.get(2, y, x));
            }
        }
    }
}
