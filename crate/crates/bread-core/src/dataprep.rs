//! Dataset ingestion, synthetic exposure augmentation, and patch sampling.
//!
//! Manifests are plain-text files: one sample per line, tab-separated
//! low/high paths for pairs, or a single scene-directory path per line for
//! exposure sequences. All paths are relative to the manifest's directory.
//! Loading is deterministic: entries are sorted lexicographically.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::can::ExposureSequence;
use crate::imagecore::{load_png, Plane, RgbImage};
use crate::nnkit::kernels;
use crate::{Error, Result};

pub const DEFAULT_EXPOSURE_COUNT: usize = 8;
pub const DEFAULT_OVEREXPOSE_FRAC: f64 = 0.25;
/// Gain returned for an image whose quantile luminance is zero.
pub const ALL_BLACK_GAIN: f64 = 100.0;

/// One low/normal-light pair of identical dimensions.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub scene: String,
    pub low: RgbImage,
    pub high: RgbImage,
}

impl PairedSample {
    pub fn new(scene: impl Into<String>, low: RgbImage, high: RgbImage) -> Result<Self> {
        let scene = scene.into();
        if low.height() != high.height() || low.width() != high.width() {
            return Err(Error::Data(format!(
                "pair {scene}: low is {}x{}, high is {}x{}",
                low.height(),
                low.width(),
                high.height(),
                high.width()
            )));
        }
        Ok(PairedSample { scene, low, high })
    }
}

fn manifest_lines(manifest: &Path) -> Result<(PathBuf, Vec<String>)> {
    let text = std::fs::read_to_string(manifest).map_err(|e| {
        Error::Data(format!("cannot read manifest {}: {e}", manifest.display()))
    })?;
    let base = manifest.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Ok((base, lines))
}

/// Parses a paired manifest into (scene, low path, high path) entries,
/// sorted lexicographically by the listed paths. Referenced files are not
/// opened; callers decide whether a missing file is fatal.
pub fn paired_manifest_entries(manifest: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let (base, mut lines) = manifest_lines(manifest)?;
    lines.sort();
    let mut entries = Vec::with_capacity(lines.len());
    for line in &lines {
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(low), Some(high), None) => {
                let low_path = base.join(low);
                let scene = low_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                entries.push((scene, low_path, base.join(high)));
            }
            _ => {
                return Err(Error::Data(format!(
                    "manifest line {line:?} is not two tab-separated paths"
                )))
            }
        }
    }
    Ok(entries)
}

/// Loads every pair listed in the manifest, sorted lexicographically by the
/// listed paths. Every referenced file must exist and each pair must share
/// dimensions.
pub fn load_paired_dataset(manifest: &Path) -> Result<Vec<PairedSample>> {
    let entries = paired_manifest_entries(manifest)?;
    for (_, low, high) in &entries {
        for path in [low, high] {
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "referenced file does not exist: {}",
                    path.display()
                )));
            }
        }
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (scene, low_path, high_path) in &entries {
        samples.push(PairedSample::new(
            scene.clone(),
            load_png(low_path)?,
            load_png(high_path)?,
        )?);
    }
    Ok(samples)
}

/// Gain whose application over-exposes (value strictly above 1) at most
/// `frac` of the pixels: the reciprocal of the `(1 - frac)` quantile of the
/// per-pixel max-over-RGB, floored at 1.
pub fn max_exposure_gain(img: &RgbImage, frac: f64) -> Result<f64> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Domain(format!(
            "over-exposure fraction must be in (0, 1), got {frac}"
        )));
    }
    let n = img.height() * img.width();
    let mut maxes: Vec<f32> = (0..n)
        .map(|i| {
            img.r().data()[i]
                .max(img.g().data()[i])
                .max(img.b().data()[i])
        })
        .collect();
    maxes.sort_by(|a, b| a.partial_cmp(b).expect("finite pixel values"));
    let idx = ((n - 1) as f64 * (1.0 - frac)).round() as usize;
    let q = f64::from(maxes[idx]);
    if q <= 0.0 {
        return Ok(ALL_BLACK_GAIN);
    }
    Ok((1.0 / q).max(1.0))
}

/// Synthesizes `count` exposures with gains evenly spaced on
/// `[1, max_exposure_gain]` inclusive; each output is `clamp01(gain * low)`.
pub fn synthesize_exposures(low: &RgbImage, count: usize, frac: f64) -> Result<Vec<RgbImage>> {
    if count == 0 {
        return Err(Error::Domain("exposure count must be at least 1".into()));
    }
    let g_max = max_exposure_gain(low, frac)?;
    let gain_plane = |p: &Plane, gain: f64| p.map(|v| (f64::from(v) * gain).clamp(0.0, 1.0) as f32);
    (0..count)
        .map(|i| {
            let gain = if count == 1 {
                1.0
            } else {
                1.0 + (g_max - 1.0) * i as f64 / (count - 1) as f64
            };
            RgbImage::new(
                gain_plane(low.r(), gain),
                gain_plane(low.g(), gain),
                gain_plane(low.b(), gain),
            )
        })
        .collect()
}

/// Crops the same window from both images of a pair, horizontally flipping
/// both with probability 1/2. Draw order: row origin, column origin, flip.
pub fn random_patch(
    sample: &PairedSample,
    size: usize,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    let (h, w) = (sample.low.height(), sample.low.width());
    if size > h || size > w {
        return Err(Error::Size(format!(
            "patch {size} exceeds image {h}x{w}"
        )));
    }
    if size == 0 || size % 8 != 0 {
        return Err(Error::Size(format!("patch size {size} must be a positive multiple of 8")));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let flip = rng.gen_bool(0.5);
    let cut = |p: &Plane| {
        let c = kernels::crop(p, y0, x0, size, size);
        if flip {
            kernels::hflip(&c)
        } else {
            c
        }
    };
    let crop_img = |img: &RgbImage| {
        RgbImage::new(cut(img.r()), cut(img.g()), cut(img.b())).expect("crop preserves validity")
    };
    Ok(PairedSample {
        scene: sample.scene.clone(),
        low: crop_img(&sample.low),
        high: crop_img(&sample.high),
    })
}

/// Loads exposure sequences: each manifest line names a scene directory
/// whose PNG files, sorted by filename, are the increasing exposures.
/// Scenes with fewer than two images are skipped with a warning.
pub fn load_exposure_sequences(manifest: &Path) -> Result<Vec<ExposureSequence>> {
    let (base, mut lines) = manifest_lines(manifest)?;
    lines.sort();
    let mut sequences = Vec::new();
    for line in &lines {
        let dir = base.join(line);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        if files.len() < 2 {
            log::warn!(
                "skipping exposure scene {} with {} usable images",
                dir.display(),
                files.len()
            );
            continue;
        }
        let images = files.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        sequences.push(ExposureSequence::new(line.clone(), images)?);
    }
    Ok(sequences)
}
