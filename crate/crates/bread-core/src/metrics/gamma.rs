//! Scalar gamma alignment of a luminance plane to a reference.
//!
//! The exponent minimizing the squared error is searched over [0.1, 10]: a
//! 41-point log-spaced grid containing 1.0 brackets the minimum, then
//! golden-section refinement narrows the bracket below 1e-4. Alignment never
//! worsens the squared error; when no exponent beats the identity, gamma 1
//! and the untouched plane come back.

use crate::imagecore::{rgb_to_ycbcr, ycbcr_to_rgb, Plane, RgbImage, YCbCrImage};
use crate::{Error, Result};

const GAMMA_LO: f64 = 0.1;
const GAMMA_HI: f64 = 10.0;
const GRID_POINTS: usize = 41;
const TOL: f64 = 1e-4;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Best-fitting exponent and `y_out` raised to it. Inputs are read clamped
/// to [0, 1].
pub fn gamma_align(y_out: &Plane, y_ref: &Plane) -> Result<(f64, Plane)> {
    if !y_out.same_shape(y_ref) {
        return Err(Error::Shape(format!(
            "gamma alignment needs matching planes, got {:?} vs {:?}",
            y_out.shape(),
            y_ref.shape()
        )));
    }
    let out: Vec<f64> = y_out
        .data()
        .iter()
        .map(|&v| f64::from(v).clamp(0.0, 1.0))
        .collect();
    let reference: Vec<f64> = y_ref
        .data()
        .iter()
        .map(|&v| f64::from(v).clamp(0.0, 1.0))
        .collect();
    let mse_at = |g: f64| -> f64 {
        let mut acc = 0.0;
        for (o, r) in out.iter().zip(&reference) {
            let d = o.powf(g) - r;
            acc += d * d;
        }
        acc / out.len() as f64
    };
    let identity_mse = {
        let mut acc = 0.0;
        for (o, r) in out.iter().zip(&reference) {
            let d = o - r;
            acc += d * d;
        }
        acc / out.len() as f64
    };

    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| {
            let span = (GAMMA_HI / GAMMA_LO).log10();
            GAMMA_LO * 10f64.powf(span * i as f64 / (GRID_POINTS - 1) as f64)
        })
        .collect();
    let mut best = (1.0f64, identity_mse);
    let track = |g: f64, m: f64, best: &mut (f64, f64)| {
        if m < best.1 {
            *best = (g, m);
        }
    };
    let mut argmin = 0usize;
    let mut argmin_mse = f64::INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        let m = mse_at(g);
        track(g, m, &mut best);
        if m < argmin_mse {
            argmin_mse = m;
            argmin = i;
        }
    }

    let (mut a, mut b) = (
        grid[argmin.saturating_sub(1)],
        grid[(argmin + 1).min(GRID_POINTS - 1)],
    );
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = mse_at(c);
    let mut fd = mse_at(d);
    track(c, fc, &mut best);
    track(d, fd, &mut best);
    while b - a > TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = mse_at(c);
            track(c, fc, &mut best);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = mse_at(d);
            track(d, fd, &mut best);
        }
    }

    let gamma = best.0;
    if gamma == 1.0 {
        return Ok((1.0, y_out.clone()));
    }
    let aligned = Plane::from_vec(
        1,
        y_out.h(),
        y_out.w(),
        out.iter().map(|o| o.powf(gamma) as f32).collect(),
    );
    // The f32 store rounds each pixel; keep the identity if that ate the gain.
    let realized = {
        let mut acc = 0.0;
        for (o, r) in aligned.data().iter().zip(&reference) {
            let d = f64::from(*o) - r;
            acc += d * d;
        }
        acc / reference.len() as f64
    };
    if realized > identity_mse {
        return Ok((1.0, y_out.clone()));
    }
    Ok((gamma, aligned))
}

/// Gamma-aligns the output luminance to the reference and recombines it with
/// the output's own chrominance. The `_C` metric variants measure this image.
pub fn align_luminance(output: &RgbImage, reference: &RgbImage) -> Result<(f64, RgbImage)> {
    if output.height() != reference.height() || output.width() != reference.width() {
        return Err(Error::Shape(format!(
            "luminance alignment needs matching shapes, got {}x{} vs {}x{}",
            output.height(),
            output.width(),
            reference.height(),
            reference.width()
        )));
    }
    let out = rgb_to_ycbcr(output);
    let reference = rgb_to_ycbcr(reference);
    let (gamma, aligned_y) = gamma_align(out.y(), reference.y())?;
    let merged = YCbCrImage::new(aligned_y, out.cb().clone(), out.cr().clone())?;
    Ok((gamma, ycbcr_to_rgb(&merged)))
}
