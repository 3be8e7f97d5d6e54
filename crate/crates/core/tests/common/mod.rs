#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Photograph-like content: smooth gradients with a few solid shapes.
pub fn content_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let shapes: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.3),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
        let mut c = [base[0] * (1.0 - u) + 0.2 * v, base[1] * v + 0.3 * u, base[2] * (1.0 - v)];
        for (cx, cy, r, col) in &shapes {
            if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
                c = *col;
            }
        }
        Rgb(c.map(|t| (t.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Artwork-like style: coloured oriented stripes with noise.
pub fn style_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let freq = rng.random_range(0.2..0.9);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    RgbImage::from_fn(size, size, |x, y| {
        let t = ((x as f64 * ca + y as f64 * sa) * freq).sin() * 0.5 + 0.5;
        let n: f64 = rng.random_range(-0.08..0.08);
        Rgb([0, 1, 2].map(|k| ((a[k] * t + b[k] * (1.0 - t) + n).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes `n` content and `n` style PNGs under `root`; returns both directories.
pub fn smoke_corpus(root: &Path, n: usize, size: u32) -> (PathBuf, PathBuf) {
    let c = root.join("content");
    let s = root.join("style");
    std::fs::create_dir_all(&c).unwrap();
    std::fs::create_dir_all(&s).unwrap();
    for i in 0..n {
        content_image(i as u64, size).save(c.join(format!("c{i:02}.png"))).unwrap();
        style_image(i as u64, size).save(s.join(format!("s{i:02}.png"))).unwrap();
    }
    (c, s)
}

pub fn report(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
}
