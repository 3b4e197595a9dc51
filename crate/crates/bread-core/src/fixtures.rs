//! Deterministic synthetic scenes for tests, benchmarks, and desk-scale
//! training runs.
//!
//! Each scene is built from smooth sinusoidal color fields: the reference
//! image is the field itself, the low-light image is the field times a dim
//! smooth illumination plus mild sensor noise. Everything is quantized to
//! the 8-bit grid so that a written PNG loads back bit-identically.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::imagecore::{save_png, Plane, RgbImage};
use crate::nnkit::Tensor;
use crate::Result;

/// Sum of a few random sinusoids, normalized to `[lo, hi]`.
fn smooth_field(rng: &mut ChaCha20Rng, h: usize, w: usize, lo: f64, hi: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(a, fy, fx, phase) in &waves {
                let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                v += a * (t + phase).sin();
            }
            field.push(v);
        }
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    field
        .iter()
        .map(|v| lo + (hi - lo) * (v - min) / span)
        .collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn to_plane(h: usize, w: usize, vals: impl Iterator<Item = f64>) -> Plane {
    Tensor::from_vec(1, h, w, vals.map(quantize).collect())
}

/// Smooth colorful reference content in roughly [0.15, 0.95].
fn scene_content(rng: &mut ChaCha20Rng, h: usize, w: usize) -> [Vec<f64>; 3] {
    let base = smooth_field(rng, h, w, 0.25, 0.85);
    [0usize, 1, 2].map(|_| {
        let tint = smooth_field(rng, h, w, -0.12, 0.12);
        base.iter()
            .zip(tint.iter())
            .map(|(b, t)| (b + t).clamp(0.02, 0.98))
            .collect()
    })
}

/// One synthetic low/reference pair. The low image is the reference under a
/// smooth dim illumination field with mild Gaussian noise.
pub fn paired_scene(seed: u64, h: usize, w: usize) -> (RgbImage, RgbImage) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let content = scene_content(&mut rng, h, w);
    let illum = smooth_field(&mut rng, h, w, 0.08, 0.30);
    let high = RgbImage::new(
        to_plane(h, w, content[0].iter().cloned()),
        to_plane(h, w, content[1].iter().cloned()),
        to_plane(h, w, content[2].iter().cloned()),
    )
    .expect("fields are in range");
    let mut low_planes = Vec::with_capacity(3);
    for chan in &content {
        let vals: Vec<f64> = chan
            .iter()
            .zip(illum.iter())
            .map(|(c, l)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c * l + 0.01 * z
            })
            .collect();
        low_planes.push(to_plane(h, w, vals.into_iter()));
    }
    let low = RgbImage::new(
        low_planes[0].clone(),
        low_planes[1].clone(),
        low_planes[2].clone(),
    )
    .expect("quantize clamps to range");
    (low, high)
}

/// One scene rendered at `count` increasing exposure levels.
pub fn exposure_scene(seed: u64, h: usize, w: usize, count: usize) -> Vec<RgbImage> {
    assert!(count >= 2, "a sequence needs at least two exposures");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let content = scene_content(&mut rng, h, w);
    (0..count)
        .map(|i| {
            let level = 0.15 + 0.85 * i as f64 / (count - 1) as f64;
            let plane = |chan: &Vec<f64>| to_plane(h, w, chan.iter().map(|c| c * level));
            RgbImage::new(plane(&content[0]), plane(&content[1]), plane(&content[2]))
                .expect("quantize clamps to range")
        })
        .collect()
}

/// Writes `count` paired scenes under `root` (low/NNN.png, high/NNN.png)
/// and returns the path of the tab-separated manifest.
pub fn write_paired_set(
    root: &Path,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(root.join("low")).map_err(|e| crate::Error::io(root, e))?;
    std::fs::create_dir_all(root.join("high")).map_err(|e| crate::Error::io(root, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let (low, high) = paired_scene(seed.wrapping_add(i as u64), h, w);
        let low_rel = format!("low/{i:03}.png");
        let high_rel = format!("high/{i:03}.png");
        save_png(&root.join(&low_rel), &low)?;
        save_png(&root.join(&high_rel), &high)?;
        manifest.push_str(&format!("{low_rel}\t{high_rel}\n"));
    }
    let path = root.join("pairs.txt");
    std::fs::write(&path, manifest).map_err(|e| crate::Error::io(&path, e))?;
    Ok(path)
}

/// Writes `scenes` exposure sequences under `root` (scenes/sNN/eN.png) and
/// returns the path of the manifest listing the scene directories.
pub fn write_sequence_set(
    root: &Path,
    scenes: usize,
    per_scene: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<PathBuf> {
    let mut manifest = String::new();
    for s in 0..scenes {
        let rel = format!("scenes/s{s:02}");
        let dir = root.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
        for (e, img) in exposure_scene(seed.wrapping_add(1000 + s as u64), h, w, per_scene)
            .iter()
            .enumerate()
        {
            save_png(&dir.join(format!("e{e}.png")), img)?;
        }
        manifest.push_str(&rel);
        manifest.push('\n');
    }
    let path = root.join("sequences.txt");
    std::fs::write(&path, manifest).map_err(|e| crate::Error::io(&path, e))?;
    Ok(path)
}
