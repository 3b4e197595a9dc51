//! End-to-end enhancement: the trained-network bundle, the inference graph,
//! staged training, evaluation, and the ablation runner.
//!
//! Inference is read-only and safe to run concurrently on a shared bundle.
//! Training is single-writer per stage, and outputs are bit-reproducible
//! because all data loading and sampling happens on one seeded reader.

mod ablate;
mod config;
mod evaluate;
mod train;

pub use ablate::run_ablation;
pub use config::{
    AblationVariant, RunConfig, DEFAULT_BATCH, DEFAULT_FGN_SIGMA, DEFAULT_ITERATIONS,
    DEFAULT_LEARNING_RATE, DEFAULT_LOG_EVERY, DEFAULT_PATCH, DEFAULT_PN_PEAK,
};
pub use evaluate::{evaluate, evaluate_with, EvalOptions};
pub use train::{read_loss_log, train_stage, train_stage_from};

use std::path::{Path, PathBuf};

use crate::can::adapt_color;
use crate::ian::{adjust_luminance, estimate_illumination};
use crate::imagecore::{clamp01, rgb_to_ycbcr, ycbcr_to_rgb, Plane, RgbImage, YCbCrImage};
use crate::nnkit::{
    kernels, load_checkpoint, save_checkpoint, Checkpoint, FinalActivation, NetworkSpec, StageTag,
    UNet,
};
use crate::noise::{denoise, fuse, noise_level_map, StrengthLadder};
use crate::{Error, Result};

/// Smallest image the enhancer accepts on either side.
pub const MIN_SIDE: usize = 16;

/// `<stage>.ckpt` inside a bundle or run directory.
pub fn stage_checkpoint_path(dir: &Path, stage: StageTag) -> PathBuf {
    dir.join(format!("{stage}.ckpt"))
}

fn expected_io(stage: StageTag) -> (usize, usize, FinalActivation) {
    match stage {
        StageTag::Ian => (1, 1, FinalActivation::Sigmoid),
        StageTag::Ansn => (2, 1, FinalActivation::None),
        StageTag::Nfm => (6, 1, FinalActivation::Sigmoid),
        StageTag::Can | StageTag::CanMe => (4, 2, FinalActivation::Sigmoid),
    }
}

fn check_role(stage: StageTag, spec: &NetworkSpec) -> Result<()> {
    let (ic, oc, act) = expected_io(stage);
    if spec.in_channels != ic || spec.out_channels != oc || spec.final_activation != act {
        return Err(Error::Bundle(format!(
            "{stage} network must be {ic}-in/{oc}-out with {act:?} head, got {}-in/{}-out {:?}",
            spec.in_channels, spec.out_channels, spec.final_activation
        )));
    }
    Ok(())
}

/// The four trained sub-networks plus the denoising strength ladder. The
/// color adapter slot holds either the paired-data or the multi-exposure
/// variant, never both.
#[derive(Clone, Debug)]
pub struct BreadBundle {
    ian: UNet<f32>,
    ansn: UNet<f32>,
    nfm: UNet<f32>,
    can: UNet<f32>,
    multi_exposure: bool,
    ladder: StrengthLadder,
}

impl BreadBundle {
    /// Assembles a bundle, validating every network's role before any use.
    pub fn new(
        ian: UNet<f32>,
        ansn: UNet<f32>,
        nfm: UNet<f32>,
        can: UNet<f32>,
        multi_exposure: bool,
        ladder: StrengthLadder,
    ) -> Result<Self> {
        check_role(StageTag::Ian, ian.spec())?;
        check_role(StageTag::Ansn, ansn.spec())?;
        check_role(StageTag::Nfm, nfm.spec())?;
        check_role(StageTag::Can, can.spec())?;
        Ok(BreadBundle {
            ian,
            ansn,
            nfm,
            can,
            multi_exposure,
            ladder,
        })
    }

    /// Loads `ian.ckpt`, `ansn.ckpt`, `nfm.ckpt`, and `can.ckpt` (or
    /// `can_me.ckpt` when `multi_exposure`) from one directory.
    pub fn load(dir: &Path, multi_exposure: bool) -> Result<Self> {
        let color_stage = if multi_exposure {
            StageTag::CanMe
        } else {
            StageTag::Can
        };
        let mut nets = Vec::with_capacity(4);
        for stage in [StageTag::Ian, StageTag::Ansn, StageTag::Nfm, color_stage] {
            let path = stage_checkpoint_path(dir, stage);
            if !path.is_file() {
                return Err(Error::Bundle(format!(
                    "missing {stage} checkpoint at {}",
                    path.display()
                )));
            }
            let ckpt = load_checkpoint(&path)?;
            if ckpt.stage != stage {
                return Err(Error::Bundle(format!(
                    "checkpoint at {} holds stage {}, expected {stage}",
                    path.display(),
                    ckpt.stage
                )));
            }
            nets.push(ckpt.to_network()?);
        }
        let can = nets.pop().expect("four checkpoints");
        let nfm = nets.pop().expect("four checkpoints");
        let ansn = nets.pop().expect("four checkpoints");
        let ian = nets.pop().expect("four checkpoints");
        BreadBundle::new(ian, ansn, nfm, can, multi_exposure, StrengthLadder::default())
    }

    pub fn ian(&self) -> &UNet<f32> {
        &self.ian
    }

    pub fn ansn(&self) -> &UNet<f32> {
        &self.ansn
    }

    pub fn nfm(&self) -> &UNet<f32> {
        &self.nfm
    }

    pub fn can(&self) -> &UNet<f32> {
        &self.can
    }

    pub fn multi_exposure(&self) -> bool {
        self.multi_exposure
    }

    pub fn ladder(&self) -> &StrengthLadder {
        &self.ladder
    }
}

/// Saves a stage checkpoint into a bundle directory under its wire name.
pub fn save_stage_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = stage_checkpoint_path(dir, ckpt.stage);
    save_checkpoint(&path, ckpt)?;
    Ok(path)
}

/// How the luminance half of the graph runs; the color half is shared.
enum LuminancePath<'a> {
    /// Denoise at every ladder strength, then fuse.
    Full,
    /// No denoising: the adjusted luminance is clamped and used directly.
    SkipDenoise,
    /// One denoising pass at the ladder's middle strength, clamped.
    SingleStrength,
    /// A separately trained restoration network replaces denoise + fuse.
    Restored(&'a UNet<f32>),
}

/// Full enhancement graph: decompose, brighten, denoise-and-fuse, readapt
/// color with the fused luminance as guide, recombine, clamp.
pub fn enhance(bundle: &BreadBundle, img: &RgbImage) -> Result<RgbImage> {
    enhance_inner(bundle, img, LuminancePath::Full)
}

/// Ablation graph: luminance is `clamp01(Y_IA)`, no denoising or fusion.
pub fn enhance_no_dn(bundle: &BreadBundle, img: &RgbImage) -> Result<RgbImage> {
    enhance_inner(bundle, img, LuminancePath::SkipDenoise)
}

/// Ablation graph: a single mid-ladder denoising pass replaces fusion.
pub fn enhance_no_nfm(bundle: &BreadBundle, img: &RgbImage) -> Result<RgbImage> {
    enhance_inner(bundle, img, LuminancePath::SingleStrength)
}

/// Ablation graph: `restore` maps the adjusted luminance straight to a
/// residual; denoise and fusion are skipped.
pub fn enhance_restored(
    bundle: &BreadBundle,
    restore: &UNet<f32>,
    img: &RgbImage,
) -> Result<RgbImage> {
    let s = restore.spec();
    if s.in_channels != 1 || s.out_channels != 1 || s.final_activation != FinalActivation::None {
        return Err(Error::Spec(format!(
            "restoration network must be 1-in/1-out with a linear head, got {}-in/{}-out {:?}",
            s.in_channels, s.out_channels, s.final_activation
        )));
    }
    enhance_inner(bundle, img, LuminancePath::Restored(restore))
}

fn enhance_inner(bundle: &BreadBundle, img: &RgbImage, path: LuminancePath) -> Result<RgbImage> {
    let (h, w) = (img.height(), img.width());
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Size(format!(
            "enhancement needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {h}x{w}"
        )));
    }
    let ycc = rgb_to_ycbcr(img);
    let (pad_b, pad_r) = (h.next_multiple_of(8) - h, w.next_multiple_of(8) - w);
    let pad = |p: &Plane| kernels::pad_reflect_br(p, pad_b, pad_r);
    let y = pad(ycc.y());
    let cb = pad(ycc.cb());
    let cr = pad(ycc.cr());

    let y_nf = luminance_pass(bundle, &y, path)?;
    let chroma = adapt_color(&bundle.can, &y, &cb, &cr, &y_nf)?;
    let rgb = ycbcr_to_rgb(&YCbCrImage::new(y_nf, chroma.cb, chroma.cr)?);
    let finish = |p: &Plane| kernels::crop(&clamp01(p), 0, 0, h, w);
    RgbImage::new(finish(rgb.r()), finish(rgb.g()), finish(rgb.b()))
}

fn luminance_pass(bundle: &BreadBundle, y: &Plane, path: LuminancePath) -> Result<Plane> {
    let l_hat = estimate_illumination(&bundle.ian, y)?;
    let y_ia = adjust_luminance(y, &l_hat)?;
    match path {
        LuminancePath::SkipDenoise => Ok(clamp01(&y_ia)),
        LuminancePath::Restored(net) => {
            let residual = net.forward(&y_ia)?;
            let restored = Plane::from_vec(
                1,
                y_ia.h(),
                y_ia.w(),
                y_ia.data()
                    .iter()
                    .zip(residual.data().iter())
                    .map(|(&a, &r)| a - r)
                    .collect(),
            );
            Ok(clamp01(&restored))
        }
        LuminancePath::SingleStrength => {
            let level = noise_level_map(&l_hat);
            let scale = bundle.ladder.scales()[1];
            let map = level.map(|v| (f64::from(v) * scale) as f32);
            Ok(clamp01(&denoise(&bundle.ansn, &y_ia, &map)?))
        }
        LuminancePath::Full => {
            let level = noise_level_map(&l_hat);
            let maps = bundle.ladder.maps(&level);
            let mut candidates = Vec::with_capacity(3);
            for map in &maps {
                candidates.push(denoise(&bundle.ansn, &y_ia, map)?);
            }
            fuse(&bundle.nfm, &candidates, &maps)
        }
    }
}
