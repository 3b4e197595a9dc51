//! Natural-scene-statistics quality score.
//!
//! The luminance is contrast-normalized with 7x7 Gaussian weights (sigma
//! 7/6, replicate padding, stabilizer 1 on the 0..255 scale) and split into
//! square patches. Each patch is summarized by generalized Gaussian fits:
//! shape and variance of the coefficients plus four asymmetric fits over the
//! four orientations of neighboring-coefficient products, at two scales, for
//! 36 features. Patches at least `sharpness_frac` times as sharp as the
//! sharpest are kept. The score is the Gaussian-to-Gaussian distance between
//! the image's feature statistics and a model fitted on pristine images.
//!
//! Scores are only comparable against the same model file; no parity with
//! any third-party fit is implied.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use once_cell::sync::Lazy;
use statrs::function::gamma::ln_gamma;

use crate::imagecore::RgbImage;
use crate::nnkit::kernels;
use crate::{Error, Result};

pub const NIQE_FEATURE_DIM: usize = 36;
const FEATURES_PER_SCALE: usize = 18;
const MSCN_TAPS: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
const MSCN_STABILIZER: f64 = 1.0;
const LUMA_SCALE: f64 = 255.0;
const COV_REGULARIZER: f64 = 1e-6;
const DEFAULT_SHARPNESS_FRAC: f64 = 0.75;
const MIN_PATCHES: usize = 4;
const MIN_PATCH_SIDE: usize = 16;

const ALPHA_LO: f64 = 0.2;
const ALPHA_STEP: f64 = 0.001;
const ALPHA_COUNT: usize = 9801;

// Moment ratio gamma(2/a)^2 / (gamma(1/a) gamma(3/a)) over the shape grid.
static ALPHA_RATIO: Lazy<Vec<f64>> = Lazy::new(|| {
    (0..ALPHA_COUNT)
        .map(|i| {
            let a = ALPHA_LO + ALPHA_STEP * i as f64;
            (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp()
        })
        .collect()
});

fn best_alpha(target: f64) -> f64 {
    let mut best_i = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, r) in ALPHA_RATIO.iter().enumerate() {
        let d = (r - target) * (r - target);
        if d < best_d {
            best_d = d;
            best_i = i;
        }
    }
    ALPHA_LO + ALPHA_STEP * best_i as f64
}

/// Feature Gaussian of a pristine corpus plus the patch protocol that
/// produced it.
#[derive(Clone, Debug)]
pub struct NiqeModel {
    mean: Vec<f64>,
    cov: Vec<f64>,
    patch: usize,
    sharpness_frac: f64,
}

impl NiqeModel {
    /// Validates dimensions, the patch protocol, covariance symmetry, and
    /// positive semi-definiteness.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, patch: usize, sharpness_frac: f64) -> Result<Self> {
        if mean.len() != NIQE_FEATURE_DIM || cov.len() != NIQE_FEATURE_DIM * NIQE_FEATURE_DIM {
            return Err(Error::Model(format!(
                "model needs {NIQE_FEATURE_DIM} means and {} covariances, got {} and {}",
                NIQE_FEATURE_DIM * NIQE_FEATURE_DIM,
                mean.len(),
                cov.len()
            )));
        }
        validate_patch(patch)?;
        if !(0.0..=1.0).contains(&sharpness_frac) {
            return Err(Error::Domain(format!(
                "sharpness fraction must lie in [0, 1], got {sharpness_frac}"
            )));
        }
        let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for r in 0..NIQE_FEATURE_DIM {
            for c in r + 1..NIQE_FEATURE_DIM {
                let d = (cov[r * NIQE_FEATURE_DIM + c] - cov[c * NIQE_FEATURE_DIM + r]).abs();
                if d > 1e-9 * scale {
                    return Err(Error::Model(format!(
                        "covariance is asymmetric at ({r}, {c}) by {d}"
                    )));
                }
            }
        }
        let m = DMatrix::from_row_slice(NIQE_FEATURE_DIM, NIQE_FEATURE_DIM, &cov);
        let min_eig = m
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -1e-9 * scale {
            return Err(Error::Model(format!(
                "covariance is not positive semi-definite (eigenvalue {min_eig})"
            )));
        }
        Ok(NiqeModel {
            mean,
            cov,
            patch,
            sharpness_frac,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn sharpness_frac(&self) -> f64 {
        self.sharpness_frac
    }

    /// Little-endian layout: magic `NIQEMODL`, u32 version, u32 patch, f64
    /// sharpness fraction, 36 f64 means, 36x36 f64 covariance.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(FILE_LEN);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.patch as u32).to_le_bytes());
        buf.extend_from_slice(&self.sharpness_frac.to_le_bytes());
        for v in self.mean.iter().chain(&self.cov) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a quality model file",
                path.display()
            )));
        }
        if bytes.len() != FILE_LEN {
            return Err(Error::Format(format!(
                "{} has {} bytes, expected {FILE_LEN}",
                path.display(),
                bytes.len()
            )));
        }
        let mut off = MAGIC.len();
        let mut take_u32 = |bytes: &[u8]| {
            let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
            v
        };
        let version = take_u32(&bytes);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}, expected {VERSION}"
            )));
        }
        let patch = take_u32(&bytes) as usize;
        let mut take_f64 = |bytes: &[u8]| {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
            v
        };
        let sharpness_frac = take_f64(&bytes);
        let mean: Vec<f64> = (0..NIQE_FEATURE_DIM).map(|_| take_f64(&bytes)).collect();
        let cov: Vec<f64> = (0..NIQE_FEATURE_DIM * NIQE_FEATURE_DIM)
            .map(|_| take_f64(&bytes))
            .collect();
        NiqeModel::new(mean, cov, patch, sharpness_frac)
    }
}

const MAGIC: &[u8] = b"NIQEMODL";
const VERSION: u32 = 1;
const FILE_LEN: usize = 8 + 4 + 4 + 8 + 8 * (NIQE_FEATURE_DIM + NIQE_FEATURE_DIM * NIQE_FEATURE_DIM);

fn validate_patch(patch: usize) -> Result<()> {
    if patch < MIN_PATCH_SIDE || patch % 2 != 0 {
        return Err(Error::Domain(format!(
            "patch side must be even and at least {MIN_PATCH_SIDE}, got {patch}"
        )));
    }
    Ok(())
}

/// Deterministic fit of the feature Gaussian over every sharp patch of the
/// corpus, with 1e-6 added to the covariance diagonal.
pub fn fit_niqe_model(corpus: &[RgbImage], patch: usize) -> Result<NiqeModel> {
    if corpus.is_empty() {
        return Err(Error::Domain("model fit needs a nonempty corpus".into()));
    }
    validate_patch(patch)?;
    let mut all = Vec::new();
    for img in corpus {
        all.extend(image_features(img, patch, DEFAULT_SHARPNESS_FRAC)?);
    }
    if all.len() < 2 {
        return Err(Error::Model(format!(
            "model fit needs at least two usable patches, got {}",
            all.len()
        )));
    }
    let (mean, mut cov) = gaussian_stats(&all);
    for i in 0..NIQE_FEATURE_DIM {
        cov[i * NIQE_FEATURE_DIM + i] += COV_REGULARIZER;
    }
    NiqeModel::new(mean, cov, patch, DEFAULT_SHARPNESS_FRAC)
}

/// Distance of the image's feature Gaussian from the model's.
pub fn niqe(img: &RgbImage, model: &NiqeModel) -> Result<f64> {
    let feats = image_features(img, model.patch, model.sharpness_frac)?;
    let (mean, cov) = gaussian_stats(&feats);
    let d = DVector::from_iterator(
        NIQE_FEATURE_DIM,
        model.mean.iter().zip(&mean).map(|(a, b)| a - b),
    );
    let pooled = DMatrix::from_fn(NIQE_FEATURE_DIM, NIQE_FEATURE_DIM, |r, c| {
        0.5 * (model.cov[r * NIQE_FEATURE_DIM + c] + cov[r * NIQE_FEATURE_DIM + c])
    });
    let chol = Cholesky::new(pooled).ok_or_else(|| {
        Error::Model("pooled feature covariance is not positive definite".into())
    })?;
    let x = chol.solve(&d);
    Ok(d.dot(&x).max(0.0).sqrt())
}

fn gaussian_stats(feats: &[[f64; NIQE_FEATURE_DIM]]) -> (Vec<f64>, Vec<f64>) {
    let n = feats.len();
    let mut mean = vec![0.0f64; NIQE_FEATURE_DIM];
    for f in feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; NIQE_FEATURE_DIM * NIQE_FEATURE_DIM];
    if n >= 2 {
        for f in feats {
            for r in 0..NIQE_FEATURE_DIM {
                let dr = f[r] - mean[r];
                for c in r..NIQE_FEATURE_DIM {
                    cov[r * NIQE_FEATURE_DIM + c] += dr * (f[c] - mean[c]);
                }
            }
        }
        for r in 0..NIQE_FEATURE_DIM {
            for c in r..NIQE_FEATURE_DIM {
                let v = cov[r * NIQE_FEATURE_DIM + c] / (n - 1) as f64;
                cov[r * NIQE_FEATURE_DIM + c] = v;
                cov[c * NIQE_FEATURE_DIM + r] = v;
            }
        }
    }
    (mean, cov)
}

fn luminance_255(img: &RgbImage) -> (Vec<f64>, usize, usize) {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let r = f64::from(img.r().data()[i]);
        let g = f64::from(img.g().data()[i]);
        let b = f64::from(img.b().data()[i]);
        out.push(LUMA_SCALE * (0.299 * r + 0.587 * g + 0.114 * b));
    }
    (out, h, w)
}

// Separable Gaussian with clamped (replicate) borders, same-size output.
fn blur_replicate(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = (x + k).saturating_sub(r).min(w - 1);
                acc += t * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = (y + k).saturating_sub(r).min(h - 1);
                acc += t * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Contrast-normalized coefficients and the local deviation field.
fn mscn_field(lum: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let taps = kernels::gaussian_taps::<f64>(MSCN_TAPS, MSCN_SIGMA);
    let mu = blur_replicate(lum, h, w, &taps);
    let sq: Vec<f64> = lum.iter().map(|v| v * v).collect();
    let musq = blur_replicate(&sq, h, w, &taps);
    let mut sigma = vec![0.0f64; h * w];
    let mut mscn = vec![0.0f64; h * w];
    for i in 0..h * w {
        sigma[i] = (musq[i] - mu[i] * mu[i]).max(0.0).sqrt();
        mscn[i] = (lum[i] - mu[i]) / (sigma[i] + MSCN_STABILIZER);
    }
    (mscn, sigma)
}

fn downsample2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
        }
    }
    (out, nh, nw)
}

fn ggd_fit(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    let m1 = xs.iter().map(|v| v.abs()).sum::<f64>() / n;
    let m2 = xs.iter().map(|v| v * v).sum::<f64>() / n;
    if m2 <= 0.0 {
        return Err(Error::Model(
            "contrast-normalized coefficients are all zero; the fit is degenerate".into(),
        ));
    }
    Ok((best_alpha(m1 * m1 / m2), m2))
}

fn aggd_fit(xs: &[f64]) -> Result<[f64; 4]> {
    let (mut nl, mut nr) = (0usize, 0usize);
    let (mut suml, mut sumr) = (0.0f64, 0.0f64);
    let (mut sum_abs, mut sum_sq) = (0.0f64, 0.0f64);
    for &x in xs {
        if x < 0.0 {
            nl += 1;
            suml += x * x;
        } else if x > 0.0 {
            nr += 1;
            sumr += x * x;
        }
        sum_abs += x.abs();
        sum_sq += x * x;
    }
    if nl == 0 || nr == 0 || suml <= 0.0 || sumr <= 0.0 {
        return Err(Error::Model(
            "one-sided product coefficients; the asymmetric fit is degenerate".into(),
        ));
    }
    let lsq = suml / nl as f64;
    let rsq = sumr / nr as f64;
    let gamma_hat = (lsq / rsq).sqrt();
    let n = xs.len() as f64;
    let rhat = (sum_abs / n) * (sum_abs / n) / (sum_sq / n);
    let rhat_norm = rhat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / ((gamma_hat * gamma_hat + 1.0) * (gamma_hat * gamma_hat + 1.0));
    let alpha = best_alpha(rhat_norm);
    let g1 = ln_gamma(1.0 / alpha);
    let g2 = ln_gamma(2.0 / alpha);
    let g3 = ln_gamma(3.0 / alpha);
    let scale = (0.5 * (g1 - g3)).exp();
    let bl = lsq.sqrt() * scale;
    let br = rsq.sqrt() * scale;
    let eta = (br - bl) * (g2 - g1).exp();
    Ok([alpha, eta, bl * bl, br * br])
}

// Products of horizontally, vertically, and diagonally neighboring
// coefficients, within the block.
fn paired_products(block: &[f64], side: usize) -> [Vec<f64>; 4] {
    let at = |y: usize, x: usize| block[y * side + x];
    let mut h = Vec::with_capacity(side * (side - 1));
    let mut v = Vec::with_capacity(side * (side - 1));
    let mut d1 = Vec::with_capacity((side - 1) * (side - 1));
    let mut d2 = Vec::with_capacity((side - 1) * (side - 1));
    for y in 0..side {
        for x in 0..side - 1 {
            h.push(at(y, x) * at(y, x + 1));
        }
    }
    for y in 0..side - 1 {
        for x in 0..side {
            v.push(at(y, x) * at(y + 1, x));
        }
    }
    for y in 0..side - 1 {
        for x in 0..side - 1 {
            d1.push(at(y, x) * at(y + 1, x + 1));
        }
    }
    for y in 0..side - 1 {
        for x in 1..side {
            d2.push(at(y, x) * at(y + 1, x - 1));
        }
    }
    [h, v, d1, d2]
}

fn block_features(block: &[f64], side: usize) -> Result<[f64; FEATURES_PER_SCALE]> {
    let mut out = [0.0f64; FEATURES_PER_SCALE];
    let (alpha, variance) = ggd_fit(block)?;
    out[0] = alpha;
    out[1] = variance;
    for (k, products) in paired_products(block, side).iter().enumerate() {
        let f = aggd_fit(products)?;
        out[2 + 4 * k..2 + 4 * (k + 1)].copy_from_slice(&f);
    }
    Ok(out)
}

fn extract_block(field: &[f64], width: usize, y0: usize, x0: usize, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let start = (y0 + y) * width + x0;
        out.extend_from_slice(&field[start..start + side]);
    }
    out
}

fn image_features(
    img: &RgbImage,
    patch: usize,
    sharpness_frac: f64,
) -> Result<Vec<[f64; NIQE_FEATURE_DIM]>> {
    let (lum, h, w) = luminance_255(img);
    let rows = h / patch;
    let cols = w / patch;
    if rows * cols < MIN_PATCHES {
        return Err(Error::Size(format!(
            "need at least {MIN_PATCHES} whole {patch}x{patch} patches, image is {h}x{w}"
        )));
    }
    // Crop to whole patches so the half-scale grid stays aligned.
    let (ch, cw) = (rows * patch, cols * patch);
    let mut cropped = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        cropped.extend_from_slice(&lum[y * w..y * w + cw]);
    }
    let (mscn1, sigma1) = mscn_field(&cropped, ch, cw);
    let (half, hh, hw) = downsample2(&cropped, ch, cw);
    let (mscn2, _) = mscn_field(&half, hh, hw);

    let mut sharpness = Vec::with_capacity(rows * cols);
    for ty in 0..rows {
        for tx in 0..cols {
            let block = extract_block(&sigma1, cw, ty * patch, tx * patch, patch);
            sharpness.push(block.iter().sum::<f64>() / block.len() as f64);
        }
    }
    let peak = sharpness.iter().fold(0.0f64, |a, &b| a.max(b));
    let threshold = sharpness_frac * peak;

    let half_patch = patch / 2;
    let mut feats = Vec::new();
    for ty in 0..rows {
        for tx in 0..cols {
            if sharpness[ty * cols + tx] < threshold {
                continue;
            }
            let b1 = extract_block(&mscn1, cw, ty * patch, tx * patch, patch);
            let b2 = extract_block(&mscn2, hw, ty * half_patch, tx * half_patch, half_patch);
            let f1 = block_features(&b1, patch)?;
            let f2 = block_features(&b2, half_patch)?;
            let mut f = [0.0f64; NIQE_FEATURE_DIM];
            f[..FEATURES_PER_SCALE].copy_from_slice(&f1);
            f[FEATURES_PER_SCALE..].copy_from_slice(&f2);
            feats.push(f);
        }
    }
    Ok(feats)
}
