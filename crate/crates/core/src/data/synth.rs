use std::f32::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::voc::{AnnotatedObject, AnnotationRecord};
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A generated image `[3, S, S]` with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub record: AnnotationRecord,
    pub image: Tensor,
}

pub fn default_synth_classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("synthetic_{i}")).collect()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Blob colours far apart in RGB and from the olive background.
const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.15, 0.10],
    [0.95, 0.85, 0.10],
    [0.15, 0.30, 0.90],
    [0.85, 0.15, 0.80],
    [0.10, 0.85, 0.85],
    [1.00, 0.50, 0.00],
    [0.95, 0.95, 0.90],
    [0.35, 0.05, 0.55],
    [0.10, 0.60, 0.10],
    [1.00, 0.60, 0.75],
];

/// Look of class `c` out of `k`: colour, stripe orientation and stripe period.
fn signature(c: usize, k: usize) -> ([f32; 3], f32, f32) {
    let color = if k <= PALETTE.len() { PALETTE[c] } else { hsv_to_rgb(c as f32 / k as f32, 0.8, 0.9) };
    let angle = c as f32 * PI / k as f32;
    let period = 5.0 + 3.0 * (c % 3) as f32;
    (color, angle, period)
}

/// Generates `n` images of side `size`. Image `i` shows one elliptical blob
/// of class `i % classes.len()` over a mottled background; the blob's tight
/// pixel box is the ground truth. Output depends only on the arguments.
pub fn synth_dataset(n: usize, classes: &[String], size: usize, seed: u64) -> Result<Vec<SynthImage>> {
    if n == 0 || classes.is_empty() {
        return Err(Error::param("synth", "need at least one image and one class"));
    }
    if size < 32 {
        return Err(Error::param("synth.size", format!("{size} is too small for a blob")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, "synth"));
    let s = size as f32;
    let plane = size * size;
    (0..n)
        .map(|i| {
            let class = i % classes.len();
            let (color, angle, period) = signature(class, classes.len());
            let (ca, sa) = (angle.cos(), angle.sin());

            let bg = [0.32, 0.36, 0.22].map(|v: f32| v + rng.random_range(-0.05..0.05));
            let waves: Vec<(f32, f32, f32)> = (0..2)
                .map(|_| (rng.random_range(0.01..0.05), rng.random_range(0.01..0.05), rng.random_range(0.0..2.0 * PI)))
                .collect();
            let rx = rng.random_range(0.12 * s..0.39 * s);
            let ry = rng.random_range(0.12 * s..0.39 * s);
            let cx = rng.random_range(rx + 2.0..s - rx - 2.0);
            let cy = rng.random_range(ry + 2.0..s - ry - 2.0);

            let mut data = vec![0.0f32; 3 * plane];
            let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let inside = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0;
                    let px = if inside {
                        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                        let stripe = 0.5 + 0.5 * (2.0 * PI * (fx * ca + fy * sa) / period).sin();
                        let shade = 0.65 + 0.35 * stripe;
                        color.map(|v| v * shade + rng.random_range(-0.04..0.04))
                    } else {
                        let mottle: f32 = waves.iter().map(|&(a, b, ph)| 0.05 * (a * fx + b * fy + ph).sin()).sum();
                        bg.map(|v| v + mottle + rng.random_range(-0.06..0.06))
                    };
                    for ch in 0..3 {
                        data[ch * plane + y * size + x] = px[ch].clamp(0.0, 1.0);
                    }
                }
            }
            let bbox = BBox::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32)?;
            let record = AnnotationRecord {
                filename: format!("synth_{i:04}.ppm"),
                width: size as u32,
                height: size as u32,
                depth: 3,
                objects: vec![AnnotatedObject { name: classes[class].clone(), bbox }],
            };
            Ok(SynthImage { record, image: Tensor::new(vec![3, size, size], data)? })
        })
        .collect()
}
