//! Ablation runs: train the sub-networks a variant actually uses, wire the
//! corresponding reduced inference graph, and score it.

use rand::Rng;

use crate::ian::adjust_luminance;
use crate::imagecore::{rgb_to_ycbcr, Plane, RgbImage};
use crate::metrics::MetricReport;
use crate::nnkit::{
    load_checkpoint, save_checkpoint, Checkpoint, NetworkSpec, StageTag, Tape, UNet,
    FinalActivation,
};
use crate::Result;

use super::config::AblationVariant;
use super::evaluate::{evaluate_with, EvalOptions};
use super::train::{
    adam_loop, collect_grads, crop_planes, data_rng, illumination_for, init_seed,
    load_pairs_for_patch, plane_sub, require_stage_checkpoint, train_stage,
};
use super::{
    enhance, enhance_no_dn, enhance_no_nfm, enhance_restored, expected_io, stage_checkpoint_path,
    BreadBundle, RunConfig,
};

/// Seed stream of the single-network restoration trainer.
const RESTORE_STREAM: u64 = 6;

/// The checkpoints a variant's inference graph executes. The restoration
/// net of `no_sep` lives outside the staged set and is handled separately.
fn needed_stages(variant: AblationVariant) -> &'static [StageTag] {
    match variant {
        AblationVariant::None | AblationVariant::Fgn | AblationVariant::Pn => {
            &[StageTag::Ian, StageTag::Ansn, StageTag::Nfm, StageTag::Can]
        }
        AblationVariant::NoDn => &[StageTag::Ian, StageTag::Can],
        AblationVariant::NoNfm => &[StageTag::Ian, StageTag::Ansn, StageTag::Can],
        AblationVariant::NoSep => &[StageTag::Ian, StageTag::Can],
    }
}

/// Trains whatever the variant's graph still lacks in `config.out_dir`,
/// then scores the reduced graph over the paired manifest. Existing
/// checkpoints are reused as-is, so repeated calls only re-score; point
/// different variants at different output directories to keep their
/// denoiser weights apart.
///
/// Writes `ablation_<variant>.csv` and `ablation_<variant>.json` next to
/// the checkpoints and returns the same report.
pub fn run_ablation(variant: AblationVariant, config: &RunConfig) -> Result<MetricReport> {
    let mut cfg = config.clone();
    cfg.variant = variant;
    cfg.validate()?;
    for &stage in needed_stages(variant) {
        if !stage_checkpoint_path(&cfg.out_dir, stage).is_file() {
            train_stage(stage, &cfg)?;
        }
    }
    if variant == AblationVariant::NoSep && !restore_checkpoint_path(&cfg).is_file() {
        train_restoration(&cfg)?;
    }

    let bundle = variant_bundle(variant, &cfg)?;
    let restore = match variant {
        AblationVariant::NoSep => Some(load_checkpoint(&restore_checkpoint_path(&cfg))?.to_network()?),
        _ => None,
    };
    let enhancer = |img: &RgbImage| match variant {
        AblationVariant::None | AblationVariant::Fgn | AblationVariant::Pn => enhance(&bundle, img),
        AblationVariant::NoDn => enhance_no_dn(&bundle, img),
        AblationVariant::NoNfm => enhance_no_nfm(&bundle, img),
        AblationVariant::NoSep => enhance_restored(&bundle, restore.as_ref().unwrap(), img),
    };

    let manifest = cfg.pairs_manifest()?;
    let report = evaluate_with(enhancer, manifest, &EvalOptions::default())?;
    report.write_csv(&cfg.out_dir.join(format!("ablation_{variant}.csv")))?;
    report.write_json(&cfg.out_dir.join(format!("ablation_{variant}.json")))?;
    Ok(report)
}

pub(crate) fn restore_checkpoint_path(config: &RunConfig) -> std::path::PathBuf {
    config.out_dir.join("restore.ckpt")
}

/// Assembles the inference bundle for a variant. Slots whose network the
/// graph never executes get freshly initialized placeholders so the role
/// checks still hold.
fn variant_bundle(variant: AblationVariant, config: &RunConfig) -> Result<BreadBundle> {
    let load = |stage| -> Result<UNet<f32>> {
        require_stage_checkpoint(&config.out_dir, stage, "ablation scoring")
    };
    let placeholder = |stage| -> Result<UNet<f32>> {
        let (ic, oc, act) = expected_io(stage);
        UNet::init(NetworkSpec::with_io(ic, oc, act), init_seed(config.seed, 99))
    };
    let ian = load(StageTag::Ian)?;
    let can = load(StageTag::Can)?;
    let (ansn, nfm) = match variant {
        AblationVariant::None | AblationVariant::Fgn | AblationVariant::Pn => {
            (load(StageTag::Ansn)?, load(StageTag::Nfm)?)
        }
        AblationVariant::NoNfm => (load(StageTag::Ansn)?, placeholder(StageTag::Nfm)?),
        AblationVariant::NoDn | AblationVariant::NoSep => {
            (placeholder(StageTag::Ansn)?, placeholder(StageTag::Nfm)?)
        }
    };
    BreadBundle::new(ian, ansn, nfm, can, false, Default::default())
}

/// Trains the `no_sep` restorer: a single residual network that maps the
/// adjusted luminance straight toward the reference, standing in for the
/// separated denoise-and-fuse stack. Input is the adjusted luminance, the
/// target its residual against the reference, squared error on the
/// prediction. Saved as `restore.ckpt` with the denoiser's stage tag and a
/// matching single-channel spec.
pub(crate) fn train_restoration(config: &RunConfig) -> Result<Checkpoint> {
    config.validate()?;
    let samples = load_pairs_for_patch(config)?;
    let ian = require_stage_checkpoint(&config.out_dir, StageTag::Ian, "restoration training")?;
    let items: Vec<(Plane, Plane)> = samples
        .iter()
        .map(|s| {
            let y_low = rgb_to_ycbcr(&s.low).y().clone();
            let l_hat = illumination_for(&ian, &y_low)?;
            let y_ia = adjust_luminance(&y_low, &l_hat)?;
            Ok((y_ia, rgb_to_ycbcr(&s.high).y().clone()))
        })
        .collect::<Result<_>>()?;

    let spec = NetworkSpec::with_io(1, 1, FinalActivation::None);
    let mut net = UNet::init(spec, init_seed(config.seed, RESTORE_STREAM))?;
    let mut rng = data_rng(config.seed, RESTORE_STREAM);
    let end = adam_loop(
        &mut net,
        "restore",
        config,
        config.learning_rate,
        0,
        &mut rng,
        |net, rng| {
            let (y_ia, y_high) = &items[rng.gen_range(0..items.len())];
            let crops = crop_planes(&[y_ia, y_high], config.patch, rng);
            let residual = plane_sub(&crops[0], &crops[1]);
            let mut tape = Tape::new();
            let x = tape.leaf(crops[0].clone(), false);
            let t = tape.leaf(residual, false);
            let fwd = net.forward_tape(&mut tape, x)?;
            let loss = tape.mse(fwd.output, t);
            collect_grads(tape, loss, &fwd, net)
        },
    )?;
    let ckpt = Checkpoint::from_network(&net, StageTag::Ansn, end);
    let path = restore_checkpoint_path(config);
    save_checkpoint(&path, &ckpt)?;
    Ok(ckpt)
}
