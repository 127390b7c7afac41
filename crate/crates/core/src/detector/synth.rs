//! Synthetic person-detection scenes: textured backgrounds with one to three
//! stylised "person" blobs (rounded torso, head, arms, legs).

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabeledDataset, Sample, Split};
use crate::geometry::{iou, BoundingBox};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Person height as a fraction of the image side.
    pub height_range: (f64, f64),
    /// Width over height.
    pub aspect_range: (f64, f64),
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 104,
            min_persons: 1,
            max_persons: 3,
            height_range: (0.3, 0.65),
            aspect_range: (0.55, 0.85),
            max_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PersonSpec {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

fn in_rounded_rect(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> bool {
    if px < x0 || px > x1 || py < y0 || py > y1 {
        return false;
    }
    let cx = px.clamp(x0 + r, x1 - r);
    let cy = py.clamp(y0 + r, y1 - r);
    (px - cx).powi(2) + (py - cy).powi(2) <= r * r
}

/// Which body part covers the pixel centre, if any: 0 head, 1 torso/arms,
/// 2 legs.
fn body_part(p: &PersonSpec, px: f64, py: f64) -> Option<u8> {
    let (x0, y0, w, h) = (p.x0, p.y0, p.w, p.h);
    let head_r = (0.11 * h).min(0.2 * w);
    let (hx, hy) = (x0 + 0.5 * w, y0 + head_r);
    if (px - hx).powi(2) + (py - hy).powi(2) <= head_r * head_r {
        return Some(0);
    }
    let torso_top = y0 + 1.8 * head_r;
    if in_rounded_rect(px, py, x0 + 0.12 * w, torso_top, x0 + 0.88 * w, y0 + 0.64 * h, 0.1 * w) {
        return Some(1);
    }
    // arms hang beside the torso
    let arm_top = torso_top + 0.02 * h;
    if in_rounded_rect(px, py, x0, arm_top, x0 + 0.16 * w, y0 + 0.6 * h, 0.06 * w)
        || in_rounded_rect(px, py, x0 + 0.84 * w, arm_top, x0 + w, y0 + 0.6 * h, 0.06 * w)
    {
        return Some(1);
    }
    if in_rounded_rect(px, py, x0 + 0.17 * w, y0 + 0.6 * h, x0 + 0.47 * w, y0 + h, 0.04 * w)
        || in_rounded_rect(px, py, x0 + 0.53 * w, y0 + 0.6 * h, x0 + 0.83 * w, y0 + h, 0.04 * w)
    {
        return Some(2);
    }
    None
}

/// Rasterized mask of a person blob on an `size x size` grid.
pub fn person_mask(size: usize, x0: f64, y0: f64, w: f64, h: f64) -> Array2<bool> {
    let p = PersonSpec { x0, y0, w, h };
    Array2::from_shape_fn((size, size), |(y, x)| body_part(&p, x as f64 + 0.5, y as f64 + 0.5).is_some())
}

fn mask_bbox(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated: one channel high, one low
    let mut c = [rng.gen_range(0.0..0.35), rng.gen_range(0.35..0.75), rng.gen_range(0.7..1.0)];
    let perm = rng.gen_range(0..6);
    let order: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let src = c;
    for (i, &j) in order[perm].iter().enumerate() {
        c[i] = src[j];
    }
    c
}

const SKIN: [[f64; 3]; 4] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.67, 0.52],
    [0.63, 0.44, 0.31],
    [0.40, 0.27, 0.18],
];

fn render_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<BoundingBox>, Vec<Array2<bool>>) {
    let n = cfg.size;
    let nf = n as f64;

    // background: base tint, two gratings, and low-amplitude pixel noise
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let gratings: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.05..0.4);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.03..0.12);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
            (theta.cos() * freq, theta.sin() * freq, phase, amp, tint)
        })
        .collect();
    let mut pixels = ndarray::Array3::from_shape_fn((n, n, 3), |(y, x, c)| {
        let mut v = base[c];
        for &(fx, fy, ph, amp, tint) in &gratings {
            v += amp * tint[c] * (fx * x as f64 + fy * y as f64 + ph).sin();
        }
        v
    });
    for v in pixels.iter_mut() {
        *v += rng.gen_range(-0.04..0.04);
    }

    // distractor shapes (plain discs and squares, no limbs)
    let distractors = rng.gen_range(0..=cfg.max_distractors);
    for _ in 0..distractors {
        let r = rng.gen_range(0.05..0.12) * nf;
        let (cx, cy) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let color = random_color(rng);
        let square = rng.gen_bool(0.5);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if square { dx.abs() <= r && dy.abs() <= r } else { dx * dx + dy * dy <= r * r };
                if inside {
                    for c in 0..3 {
                        pixels[[y, x, c]] = color[c] * 0.9;
                    }
                }
            }
        }
    }

    let count = rng.gen_range(cfg.min_persons..=cfg.max_persons);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    let mut masks = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 200 {
        attempts += 1;
        let h = rng.gen_range(cfg.height_range.0..cfg.height_range.1) * nf;
        let w = h * rng.gen_range(cfg.aspect_range.0..cfg.aspect_range.1);
        let x0 = rng.gen_range(0.0..(nf - w).max(1.0));
        let y0 = rng.gen_range(0.0..(nf - h).max(1.0));
        let spec = PersonSpec { x0, y0, w, h };
        let mask = person_mask(n, x0, y0, w, h);
        let Some((bx0, by0, bx1, by1)) = mask_bbox(&mask) else { continue };
        let bbox = BoundingBox::from_corners(bx0 as f64 / nf, by0 as f64 / nf, bx1 as f64 / nf, by1 as f64 / nf);
        // keep people apart and never share a detector cell
        let cell = |b: &BoundingBox| ((b.cx * 13.0) as usize, (b.cy * 13.0) as usize);
        if boxes.iter().any(|b| iou(b, &bbox) > 0.05 || cell(b) == cell(&bbox)) {
            continue;
        }

        let torso = random_color(rng);
        let legs: [f64; 3] = std::array::from_fn(|i| (random_color(rng)[i] * 0.6).min(1.0));
        let skin = SKIN[rng.gen_range(0..SKIN.len())];
        for ((y, x), &m) in mask.indexed_iter() {
            if !m {
                continue;
            }
            let part = body_part(&spec, x as f64 + 0.5, y as f64 + 0.5).expect("mask pixel");
            let color = match part {
                0 => skin,
                1 => torso,
                _ => legs,
            };
            let shade = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                pixels[[y, x, c]] = color[c] + shade;
            }
        }
        boxes.push(bbox);
        masks.push(mask);
    }

    // quantize to 8-bit levels so PNG persistence is lossless
    pixels.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let image = ImageTensor::from_array(pixels).expect("valid scene");
    (image, boxes, masks)
}

/// Generates `n` scenes. Also returns each person's rasterized mask, in box
/// order, for alignment checks.
pub fn generate_with_masks(n: usize, seed: u64, cfg: &SynthConfig) -> (LabeledDataset, Vec<Vec<Array2<bool>>>) {
    let mut samples = Vec::with_capacity(n);
    let mut all_masks = Vec::with_capacity(n);
    for i in 0..n {
        // per-image stream so scenes do not depend on earlier draws
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let (image, boxes, masks) = render_scene(cfg, &mut rng);
        samples.push(Sample {
            image_id: format!("syn{seed}-{i:05}"),
            image,
            boxes,
        });
        all_masks.push(masks);
    }
    (
        LabeledDataset {
            samples,
            split: Split::Train,
        },
        all_masks,
    )
}

pub fn generate_synthetic_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> LabeledDataset {
    generate_with_masks(n, seed, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_dataset() {
        let d = generate_synthetic_dataset(1, 0, &SynthConfig::default());
        assert_eq!(d.len(), 1);
        assert!(!d.samples[0].boxes.is_empty());
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = generate_synthetic_dataset(4, 17, &SynthConfig::default());
        let b = generate_synthetic_dataset(4, 17, &SynthConfig::default());
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(4, 18, &SynthConfig::default());
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn boxes_align_with_rasterized_masks() {
        let cfg = SynthConfig::default();
        let (d, masks) = generate_with_masks(60, 3, &cfg);
        let n = cfg.size as f64;
        for (s, ms) in d.iter().zip(&masks) {
            assert!((cfg.min_persons..=cfg.max_persons).contains(&s.boxes.len()));
            for (b, m) in s.boxes.iter().zip(ms) {
                let (x0, y0, x1, y1) = b.pixel_rect(cfg.size, cfg.size);
                let box_px = ((x1 - x0) * (y1 - y0)) as f64;
                let mask_px = m.iter().filter(|&&v| v).count() as f64;
                let inside = m
                    .indexed_iter()
                    .filter(|((y, x), &v)| v && *x >= x0 && *x < x1 && *y >= y0 && *y < y1)
                    .count() as f64;
                // IoU of mask and box rasters
                let iou = inside / (box_px + mask_px - inside);
                assert!(iou >= 0.6, "{} box {b:?} iou {iou}", s.image_id);
                assert!(b.w * n >= 1.0 && b.h * n >= 1.0);
            }
        }
    }

    #[test]
    fn pixels_are_8bit_levels() {
        let d = generate_synthetic_dataset(2, 5, &SynthConfig::default());
        for v in d.samples[0].image.view().iter() {
            let k = v * 255.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
