//! Lightness-order error.
//!
//! Lightness is the per-pixel max over RGB. Both maps are reduced to at most
//! 50 samples per side by nearest sampling, and the score is the mean over
//! ordered pixel pairs of the indicator that the relative order differs
//! between input and output, scaled by 1000. Any pointwise strictly
//! increasing remap therefore scores 0.

use crate::imagecore::RgbImage;
use crate::{Error, Result};

const MAX_SIDE: usize = 50;
const SCALE: f64 = 1000.0;

pub fn loe(input: &RgbImage, output: &RgbImage) -> Result<f64> {
    if input.height() != output.height() || input.width() != output.width() {
        return Err(Error::Shape(format!(
            "loe needs matching shapes, got {}x{} vs {}x{}",
            input.height(),
            input.width(),
            output.height(),
            output.width()
        )));
    }
    let li = downsampled_lightness(input);
    let lo = downsampled_lightness(output);
    let m = li.len();
    if m < 2 {
        return Ok(0.0);
    }
    let mut differs = 0u64;
    for p in 0..m {
        for q in 0..m {
            if p == q {
                continue;
            }
            if (li[p] >= li[q]) != (lo[p] >= lo[q]) {
                differs += 1;
            }
        }
    }
    Ok(SCALE * differs as f64 / (m * (m - 1)) as f64)
}

fn downsampled_lightness(img: &RgbImage) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let nh = h.min(MAX_SIDE);
    let nw = w.min(MAX_SIDE);
    let sample = |n: usize, full: usize, i: usize| -> usize {
        (((i as f64 + 0.5) * full as f64 / n as f64).floor() as usize).min(full - 1)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        let y = sample(nh, h, i);
        for j in 0..nw {
            let x = sample(nw, w, j);
            let r = f64::from(img.r().at(0, y, x));
            let g = f64::from(img.g().at(0, y, x));
            let b = f64::from(img.b().at(0, y, x));
            out.push(r.max(g).max(b));
        }
    }
    out
}
