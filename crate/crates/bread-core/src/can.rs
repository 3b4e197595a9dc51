//! Luminance-guided chrominance regeneration, including the multi-exposure
//! training variant.
//!
//! The color adaption network consumes the low-light Y/Cb/Cr planes plus a
//! guide luminance and predicts the chrominance pair matching the guide's
//! exposure. Training guides with the reference luminance (or a brighter
//! exposure of the same scene); inference guides with the fused luminance.

use rand::Rng;

use crate::imagecore::{rgb_to_ycbcr, split_planes, stack_planes, Plane, RgbImage, YCbCrImage};
use crate::nnkit::{FinalActivation, Real, UNet};
use crate::{Error, Result};

/// Predicted or reference chrominance planes, 0.5-centered.
#[derive(Clone, Debug, PartialEq)]
pub struct ChromaPair {
    pub cb: Plane,
    pub cr: Plane,
}

/// One scene photographed at increasing exposures.
#[derive(Clone, Debug)]
pub struct ExposureSequence {
    scene: String,
    images: Vec<RgbImage>,
}

impl ExposureSequence {
    pub fn new(scene: impl Into<String>, images: Vec<RgbImage>) -> Result<Self> {
        let scene = scene.into();
        if images.len() < 2 {
            return Err(Error::Data(format!(
                "exposure sequence {scene} has {} images, need at least 2",
                images.len()
            )));
        }
        let (h, w) = (images[0].height(), images[0].width());
        for img in &images[1..] {
            if img.height() != h || img.width() != w {
                return Err(Error::Data(format!(
                    "exposure sequence {scene} mixes {h}x{w} and {}x{} images",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(ExposureSequence { scene, images })
    }

    pub fn scene(&self) -> &str {
        &self.scene
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    /// Always false: construction requires at least two images.
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One multi-exposure training sample: full input decomposition at exposure
/// e1, guide luminance and target chrominance at a different exposure e2.
#[derive(Clone, Debug)]
pub struct MePair {
    pub input: YCbCrImage,
    pub guide_y: Plane,
    pub target: ChromaPair,
}

fn validate_can_spec<T: Real>(net: &UNet<T>) -> Result<()> {
    let s = net.spec();
    if s.in_channels != 4 || s.out_channels != 2 || s.final_activation != FinalActivation::Sigmoid
    {
        return Err(Error::Spec(format!(
            "color adaption network must be 4-in/2-out with sigmoid head, got {}-in/{}-out {:?}",
            s.in_channels, s.out_channels, s.final_activation
        )));
    }
    Ok(())
}

/// Predicts chrominance for the guide luminance's exposure. Input channel
/// order is contractual: y_low, cb_low, cr_low, guide. Output channel 0 is
/// Cb, channel 1 is Cr.
pub fn adapt_color(
    net: &UNet<f32>,
    y_low: &Plane,
    cb_low: &Plane,
    cr_low: &Plane,
    y_guide: &Plane,
) -> Result<ChromaPair> {
    validate_can_spec(net)?;
    let input = stack_planes(&[y_low, cb_low, cr_low, y_guide])?;
    let out = net.forward(&input)?;
    let mut planes = split_planes(&out).into_iter();
    let cb = planes.next().expect("two output channels");
    let cr = planes.next().expect("two output channels");
    Ok(ChromaPair { cb, cr })
}

/// Sum of the per-channel mean squared errors.
pub fn can_loss(pred: &ChromaPair, reference: &ChromaPair) -> Result<f64> {
    let mse = |a: &Plane, b: &Plane| -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::Shape(format!(
                "chroma planes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut acc = 0.0f64;
        for (&p, &t) in a.data().iter().zip(b.data().iter()) {
            let d = f64::from(p) - f64::from(t);
            acc += d * d;
        }
        Ok(acc / a.len() as f64)
    };
    let loss = mse(&pred.cb, &reference.cb)? + mse(&pred.cr, &reference.cr)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("color adaption loss is not finite".into()));
    }
    Ok(loss)
}

/// Draws two distinct exposures uniformly (ordered, without replacement) and
/// assembles the training sample via the YCbCr decomposition.
pub fn sample_me_pair(seq: &ExposureSequence, rng: &mut impl Rng) -> Result<MePair> {
    let n = seq.images.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "exposure sequence {} too short to sample from",
            seq.scene
        )));
    }
    let i1 = rng.gen_range(0..n);
    let mut i2 = rng.gen_range(0..n - 1);
    if i2 >= i1 {
        i2 += 1;
    }
    let input = rgb_to_ycbcr(&seq.images[i1]);
    let reference = rgb_to_ycbcr(&seq.images[i2]);
    Ok(MePair {
        input,
        guide_y: reference.y().clone(),
        target: ChromaPair {
            cb: reference.cb().clone(),
            cr: reference.cr().clone(),
        },
    })
}
