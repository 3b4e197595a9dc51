//! sRGB to CIELAB conversion and the CIEDE2000 color difference.
//!
//! Linearization uses the piecewise sRGB curve with the 0.04045 threshold.
//! The Lab white point is the matrix image of RGB white, so neutral grays
//! land on a* = b* = 0 up to rounding.

use crate::imagecore::RgbImage;
use crate::{Error, Result};

/// CIE 1976 L*a*b* coordinates under the D65 white point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

const XYZ_FROM_LINEAR: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn linearize(c: f64) -> f64 {
    if c > 0.04045 {
        ((c + 0.055) / 1.055).powf(2.4)
    } else {
        c / 12.92
    }
}

pub fn srgb_to_lab(r: f64, g: f64, b: f64) -> Lab {
    let lin = [linearize(r), linearize(g), linearize(b)];
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let mut fc = [0.0f64; 3];
    for (i, row) in XYZ_FROM_LINEAR.iter().enumerate() {
        let channel = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        let white = row[0] + row[1] + row[2];
        fc[i] = f(channel / white);
    }
    Lab {
        l: 116.0 * fc[1] - 16.0,
        a: 500.0 * (fc[0] - fc[1]),
        b: 200.0 * (fc[1] - fc[2]),
    }
}

/// CIEDE2000 with unit parametric factors, including the hue branch rules
/// for zero-chroma inputs.
pub fn ciede2000(p: &Lab, q: &Lab) -> f64 {
    const POW25_7: f64 = 6103515625.0;

    let c1 = p.a.hypot(p.b);
    let c2 = q.a.hypot(q.b);
    let c_bar7 = (0.5 * (c1 + c2)).powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + POW25_7)).sqrt());
    let a1p = (1.0 + g) * p.a;
    let a2p = (1.0 + g) * q.a;
    let c1p = a1p.hypot(p.b);
    let c2p = a2p.hypot(q.b);
    let h1p = hue_degrees(p.b, a1p);
    let h2p = hue_degrees(q.b, a2p);

    let dl = q.l - p.l;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * (0.5 * dh.to_radians()).sin();

    let l_bar = 0.5 * (p.l + q.l);
    let cp_bar = 0.5 * (c1p + c2p);
    let h_bar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        0.5 * (h1p + h2p)
    } else if h1p + h2p < 360.0 {
        0.5 * (h1p + h2p + 360.0)
    } else {
        0.5 * (h1p + h2p - 360.0)
    };

    let t = 1.0 - 0.17 * (h_bar - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar).to_radians().cos()
        + 0.32 * (3.0 * h_bar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar - 63.0).to_radians().cos();

    let l50 = (l_bar - 50.0) * (l_bar - 50.0);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cp_bar;
    let sh = 1.0 + 0.015 * cp_bar * t;
    let cp_bar7 = cp_bar.powi(7);
    let rc = 2.0 * (cp_bar7 / (cp_bar7 + POW25_7)).sqrt();
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let rt = -rc * (2.0 * d_theta).to_radians().sin();

    let (tl, tc, th) = (dl / sl, dc / sc, dh_big / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

fn hue_degrees(b: f64, a_prime: f64) -> f64 {
    if b == 0.0 && a_prime == 0.0 {
        return 0.0;
    }
    let d = b.atan2(a_prime).to_degrees();
    if d < 0.0 {
        d + 360.0
    } else {
        d
    }
}

/// Mean per-pixel CIEDE2000 between two images.
pub fn delta_e(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "delta_e needs matching shapes, got {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let n = a.height() * a.width();
    let mut acc = 0.0f64;
    for i in 0..n {
        let la = srgb_to_lab(
            f64::from(a.r().data()[i]),
            f64::from(a.g().data()[i]),
            f64::from(a.b().data()[i]),
        );
        let lb = srgb_to_lab(
            f64::from(b.r().data()[i]),
            f64::from(b.g().data()[i]),
            f64::from(b.b().data()[i]),
        );
        acc += ciede2000(&la, &lb);
    }
    Ok(acc / n as f64)
}
