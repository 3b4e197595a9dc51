//! Image containers, YCbCr conversion, and spatial differential operators.
//!
//! Pixels are real values in [0, 1]; 8-bit files are divided by 255 on load
//! and scaled back with rounding on save. Colorspace math is the full-range
//! BT.601 analog form with chrominance centered at 0.5, evaluated per pixel
//! in f64 and stored in f32. All functions here are pure.

use std::path::Path;

use crate::nnkit::Tensor;
use crate::{Error, Result};

/// Single-channel image plane, row-major.
pub type Plane = Tensor<f32>;

fn validate_plane(name: &str, p: &Plane, lo: f32, hi: f32) -> Result<()> {
    if p.c() != 1 {
        return Err(Error::Shape(format!(
            "{name} plane must have one channel, got {}",
            p.c()
        )));
    }
    for &v in p.data() {
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::Domain(format!(
                "{name} plane value {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

fn validate_same_shape(a: &Plane, b: &Plane, c: &Plane) -> Result<()> {
    if !a.same_shape(b) || !a.same_shape(c) {
        return Err(Error::Shape(format!(
            "plane shapes differ: {:?} vs {:?} vs {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    Ok(())
}

/// RGB image; all planes in [0, 1] and identically shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    r: Plane,
    g: Plane,
    b: Plane,
}

impl RgbImage {
    pub fn new(r: Plane, g: Plane, b: Plane) -> Result<Self> {
        validate_same_shape(&r, &g, &b)?;
        validate_plane("r", &r, 0.0, 1.0)?;
        validate_plane("g", &g, 0.0, 1.0)?;
        validate_plane("b", &b, 0.0, 1.0)?;
        Ok(RgbImage { r, g, b })
    }

    pub fn r(&self) -> &Plane {
        &self.r
    }

    pub fn g(&self) -> &Plane {
        &self.g
    }

    pub fn b(&self) -> &Plane {
        &self.b
    }

    pub fn height(&self) -> usize {
        self.r.h()
    }

    pub fn width(&self) -> usize {
        self.r.w()
    }

    /// Packs to interleaved 8-bit RGB with round-to-nearest.
    pub fn to_packed_rgb8(&self) -> Vec<u8> {
        let n = self.height() * self.width();
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for p in [&self.r, &self.g, &self.b] {
                out.push((f64::from(p.data()[i]) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Unpacks interleaved 8-bit RGB, dividing by 255.
    pub fn from_packed_rgb8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "packed buffer has {} bytes, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        let mut planes = [Vec::new(), Vec::new(), Vec::new()];
        for px in data.chunks_exact(3) {
            for (k, plane) in planes.iter_mut().enumerate() {
                plane.push((f64::from(px[k]) / 255.0) as f32);
            }
        }
        let [r, g, b] = planes;
        RgbImage::new(
            Plane::from_vec(1, height, width, r),
            Plane::from_vec(1, height, width, g),
            Plane::from_vec(1, height, width, b),
        )
    }
}

/// YCbCr image; chrominance is centered at 0.5, all planes in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrImage {
    y: Plane,
    cb: Plane,
    cr: Plane,
}

impl YCbCrImage {
    pub fn new(y: Plane, cb: Plane, cr: Plane) -> Result<Self> {
        validate_same_shape(&y, &cb, &cr)?;
        validate_plane("y", &y, 0.0, 1.0)?;
        validate_plane("cb", &cb, 0.0, 1.0)?;
        validate_plane("cr", &cr, 0.0, 1.0)?;
        Ok(YCbCrImage { y, cb, cr })
    }

    pub fn y(&self) -> &Plane {
        &self.y
    }

    pub fn cb(&self) -> &Plane {
        &self.cb
    }

    pub fn cr(&self) -> &Plane {
        &self.cr
    }

    pub fn height(&self) -> usize {
        self.y.h()
    }

    pub fn width(&self) -> usize {
        self.y.w()
    }
}

/// Full-range BT.601 analog transform, clamped to [0, 1].
pub fn rgb_to_ycbcr(img: &RgbImage) -> YCbCrImage {
    let n = img.height() * img.width();
    let mut y = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for i in 0..n {
        let r = f64::from(img.r.data()[i]);
        let g = f64::from(img.g.data()[i]);
        let b = f64::from(img.b.data()[i]);
        let yv = 0.299 * r + 0.587 * g + 0.114 * b;
        y.push(yv.clamp(0.0, 1.0) as f32);
        cb.push((0.564 * (b - yv) + 0.5).clamp(0.0, 1.0) as f32);
        cr.push((0.713 * (r - yv) + 0.5).clamp(0.0, 1.0) as f32);
    }
    let (h, w) = (img.height(), img.width());
    YCbCrImage {
        y: Plane::from_vec(1, h, w, y),
        cb: Plane::from_vec(1, h, w, cb),
        cr: Plane::from_vec(1, h, w, cr),
    }
}

/// Algebraic inverse of [`rgb_to_ycbcr`], clamped to [0, 1].
pub fn ycbcr_to_rgb(img: &YCbCrImage) -> RgbImage {
    let n = img.height() * img.width();
    let mut r = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let yv = f64::from(img.y.data()[i]);
        let cbv = f64::from(img.cb.data()[i]);
        let crv = f64::from(img.cr.data()[i]);
        let rv = yv + (crv - 0.5) / 0.713;
        let bv = yv + (cbv - 0.5) / 0.564;
        let gv = (yv - 0.299 * rv - 0.114 * bv) / 0.587;
        r.push(rv.clamp(0.0, 1.0) as f32);
        g.push(gv.clamp(0.0, 1.0) as f32);
        b.push(bv.clamp(0.0, 1.0) as f32);
    }
    let (h, w) = (img.height(), img.width());
    RgbImage {
        r: Plane::from_vec(1, h, w, r),
        g: Plane::from_vec(1, h, w, g),
        b: Plane::from_vec(1, h, w, b),
    }
}

/// Forward differences along columns (dx) and rows (dy); the trailing
/// column/row is zero. |gradient| is defined downstream as |dx| + |dy|.
pub fn spatial_gradients(p: &Plane) -> (Plane, Plane) {
    (crate::nnkit::kernels::dx(p), crate::nnkit::kernels::dy(p))
}

/// Elementwise min(max(v, 0), 1).
pub fn clamp01(p: &Plane) -> Plane {
    p.map(|v| v.clamp(0.0, 1.0))
}

/// Stacks single-channel planes into one multi-channel tensor.
pub fn stack_planes(planes: &[&Plane]) -> Result<Tensor<f32>> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero planes".into()))?;
    let (h, w) = (first.h(), first.w());
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.c() != 1 || p.h() != h || p.w() != w {
            return Err(Error::Shape(format!(
                "plane shape {:?} does not match (1, {h}, {w})",
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(planes.len(), h, w, data))
}

/// Splits a multi-channel tensor into per-channel planes.
pub fn split_planes(t: &Tensor<f32>) -> Vec<Plane> {
    (0..t.c())
        .map(|c| Plane::from_vec(1, t.h(), t.w(), t.channel(c).to_vec()))
        .collect()
}

/// Reads an 8-bit RGB PNG (other bit depths/colortypes are converted).
pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    RgbImage::from_packed_rgb8(h, w, rgb.as_raw())
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.to_packed_rgb8(),
    )
    .expect("packed buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
