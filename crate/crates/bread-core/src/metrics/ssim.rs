//! Single-scale structural similarity averaged over the RGB channels.
//!
//! Windows are 11-tap Gaussian (sigma 1.5) in valid mode, so only pixels with
//! a full window contribute. Stabilizers use K1 = 0.01 and K2 = 0.03 on a
//! unit dynamic range.

use crate::imagecore::RgbImage;
use crate::nnkit::{kernels, Tensor};
use crate::{Error, Result};

const TAPS: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;

/// Mean structural similarity in [-1, 1]. Both dimensions must cover at
/// least one 11x11 window.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "ssim needs matching shapes, got {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.height() < TAPS || a.width() < TAPS {
        return Err(Error::Size(format!(
            "ssim needs at least {TAPS}x{TAPS} pixels, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let mut total = 0.0;
    for (pa, pb) in [(a.r(), b.r()), (a.g(), b.g()), (a.b(), b.b())] {
        total += channel_ssim(&pa.cast::<f64>(), &pb.cast::<f64>());
    }
    Ok(total / 3.0)
}

fn channel_ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let taps = kernels::gaussian_taps::<f64>(TAPS, SIGMA);
    let mul = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect();
        Tensor::from_vec(a.c(), a.h(), a.w(), data)
    };
    let mx = kernels::blur_valid(x, &taps);
    let my = kernels::blur_valid(y, &taps);
    let mxx = kernels::blur_valid(&mul(x, x), &taps);
    let myy = kernels::blur_valid(&mul(y, y), &taps);
    let mxy = kernels::blur_valid(&mul(x, y), &taps);

    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.data()[i], my.data()[i]);
        let vx = mxx.data()[i] - ux * ux;
        let vy = myy.data()[i] - uy * uy;
        let cov = mxy.data()[i] - ux * uy;
        acc += (2.0 * ux * uy + C1) * (2.0 * cov + C2)
            / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    acc / mx.len() as f64
}
