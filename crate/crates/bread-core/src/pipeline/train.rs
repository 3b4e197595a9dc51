//! Staged training: one Adam run per sub-network, each consuming the frozen
//! checkpoints of its prerequisites.
//!
//! Every stage runs single-threaded from one seeded generator, so a given
//! (seed, config) pair always produces bit-identical checkpoints. Scalar
//! losses go to `<out>/<stage>.log` as plain `step loss` lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::can::{sample_me_pair, ExposureSequence, MePair};
use crate::dataprep::{
    load_exposure_sequences, load_paired_dataset, random_patch, synthesize_exposures,
    PairedSample, DEFAULT_EXPOSURE_COUNT, DEFAULT_OVEREXPOSE_FRAC,
};
use crate::ian::{estimate_illumination, ian_loss};
use crate::imagecore::{rgb_to_ycbcr, stack_planes, Plane, RgbImage};
use crate::nnkit::{
    kernels, load_checkpoint, Adam, Checkpoint, NetworkSpec, StageTag, Tape, TapeForward, Tensor,
    UNet,
};
use crate::noise::{
    denoise, nfm_loss, noise_level_map, synthesize_fixed_gaussian, synthesize_noisy,
    synthesize_poisson, StrengthLadder,
};
use crate::{Error, Result, EPSILON};

use super::config::AblationVariant;
use super::{expected_io, save_stage_checkpoint, stage_checkpoint_path, RunConfig};

/// Upper end of the uniform strength range used when synthesizing training
/// noise; matches the top of the inference ladder.
pub const MAX_TRAIN_STRENGTH: f64 = 0.1;
/// Pinned learning rate of the multi-exposure finetuning phase.
pub const CAN_ME_FINETUNE_LR: f64 = 1e-4;

/// Trains one stage from scratch (or continues a prior run of the same
/// stage found in `config.out_dir` for the multi-exposure color stage).
pub fn train_stage(stage: StageTag, config: &RunConfig) -> Result<Checkpoint> {
    train_stage_from(stage, config, None)
}

/// Like [`train_stage`] but optionally seeds the parameters from an
/// existing checkpoint of the same stage; the step counter continues and
/// `config.iterations` further steps run. Optimizer moments are not stored
/// in checkpoints, so a resumed run restarts them.
pub fn train_stage_from(
    stage: StageTag,
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<Checkpoint> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    match stage {
        StageTag::Ian => train_ian(config, resume),
        StageTag::Ansn => train_ansn(config, resume),
        StageTag::Nfm => train_nfm(config, resume),
        StageTag::Can => train_can(config, resume),
        StageTag::CanMe => train_can_me(config, resume),
    }
}

fn stage_stream(stage: StageTag) -> u64 {
    match stage {
        StageTag::Ian => 1,
        StageTag::Ansn => 2,
        StageTag::Nfm => 3,
        StageTag::Can => 4,
        StageTag::CanMe => 5,
    }
}

pub(crate) fn data_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn init_seed(seed: u64, stream: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream)
}

fn init_or_resume(
    stage: StageTag,
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<(UNet<f32>, u64)> {
    match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.stage != stage {
                return Err(Error::Config(format!(
                    "resume checkpoint at {} holds stage {}, expected {stage}",
                    path.display(),
                    ckpt.stage
                )));
            }
            Ok((ckpt.to_network()?, ckpt.step))
        }
        None => {
            let (ic, oc, act) = expected_io(stage);
            let spec = NetworkSpec::with_io(ic, oc, act);
            Ok((
                UNet::init(spec, init_seed(config.seed, stage_stream(stage)))?,
                0,
            ))
        }
    }
}

/// Loads a finished prerequisite, or says which stage to run first.
pub(crate) fn require_stage_checkpoint(
    dir: &Path,
    needed: StageTag,
    running: &str,
) -> Result<UNet<f32>> {
    let path = stage_checkpoint_path(dir, needed);
    if !path.is_file() {
        return Err(Error::Dependency(format!(
            "{running} needs the {needed} checkpoint at {}; run the {needed} stage first",
            path.display()
        )));
    }
    let ckpt = load_checkpoint(&path)?;
    if ckpt.stage != needed {
        return Err(Error::Dependency(format!(
            "checkpoint at {} holds stage {}; run the {needed} stage first",
            path.display(),
            ckpt.stage
        )));
    }
    ckpt.to_network()
}

pub(crate) fn load_pairs_for_patch(config: &RunConfig) -> Result<Vec<PairedSample>> {
    let manifest = config.pairs_manifest()?;
    let samples = load_paired_dataset(manifest)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no pairs",
            manifest.display()
        )));
    }
    for s in &samples {
        if s.low.height() < config.patch || s.low.width() < config.patch {
            return Err(Error::Data(format!(
                "pair {} is {}x{}, smaller than patch {}",
                s.scene,
                s.low.height(),
                s.low.width(),
                config.patch
            )));
        }
    }
    Ok(samples)
}

fn load_sequences_for_patch(config: &RunConfig) -> Result<Vec<ExposureSequence>> {
    let manifest = config.sequences_manifest()?;
    let seqs = load_exposure_sequences(manifest)?;
    if seqs.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no usable sequences",
            manifest.display()
        )));
    }
    for seq in &seqs {
        let img = &seq.images()[0];
        if img.height() < config.patch || img.width() < config.patch {
            return Err(Error::Data(format!(
                "sequence {} is {}x{}, smaller than patch {}",
                seq.scene(),
                img.height(),
                img.width(),
                config.patch
            )));
        }
    }
    Ok(seqs)
}

/// Illumination estimate on a plane of any size: reflect-pads to the
/// network's divisibility requirement and crops the estimate back.
pub(crate) fn illumination_for(net: &UNet<f32>, y: &Plane) -> Result<Plane> {
    let (h, w) = (y.h(), y.w());
    let (pb, pr) = (h.next_multiple_of(8) - h, w.next_multiple_of(8) - w);
    if pb == 0 && pr == 0 {
        return estimate_illumination(net, y);
    }
    let padded = kernels::pad_reflect_br(y, pb, pr);
    Ok(kernels::crop(
        &estimate_illumination(net, &padded)?,
        0,
        0,
        h,
        w,
    ))
}

fn denoise_padded(net: &UNet<f32>, y: &Plane, map: &Plane) -> Result<Plane> {
    let (h, w) = (y.h(), y.w());
    let (pb, pr) = (h.next_multiple_of(8) - h, w.next_multiple_of(8) - w);
    if pb == 0 && pr == 0 {
        return denoise(net, y, map);
    }
    let out = denoise(
        net,
        &kernels::pad_reflect_br(y, pb, pr),
        &kernels::pad_reflect_br(map, pb, pr),
    )?;
    Ok(kernels::crop(&out, 0, 0, h, w))
}

pub(crate) fn plane_sub(a: &Plane, b: &Plane) -> Plane {
    Plane::from_vec(
        1,
        a.h(),
        a.w(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x - y)
            .collect(),
    )
}

/// Crops the same window from every plane, flipping all of them together
/// with probability 1/2. Draw order: row origin, column origin, flip.
pub(crate) fn crop_planes(planes: &[&Plane], size: usize, rng: &mut impl Rng) -> Vec<Plane> {
    let (h, w) = (planes[0].h(), planes[0].w());
    assert!(size <= h && size <= w, "crop exceeds plane");
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let flip = rng.gen_bool(0.5);
    planes
        .iter()
        .map(|p| {
            let c = kernels::crop(p, y0, x0, size, size);
            if flip {
                kernels::hflip(&c)
            } else {
                c
            }
        })
        .collect()
}

/// Evaluates the loss scalar and pulls per-parameter gradients off the tape.
pub(crate) fn collect_grads(
    tape: Tape<f32>,
    loss: crate::nnkit::ValueId,
    fwd: &TapeForward,
    net: &UNet<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let value = f64::from(tape.scalar(loss));
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss is not finite: {value}"
        )));
    }
    let mut grads = tape.backward(loss)?;
    let out = fwd
        .params
        .iter()
        .zip(net.params().iter())
        .map(|(&pid, p)| {
            grads.take(pid).unwrap_or_else(|| {
                let (c, h, w) = p.shape();
                Tensor::zeros(c, h, w)
            })
        })
        .collect();
    Ok((value, out))
}

/// The shared optimizer loop: `config.iterations` Adam steps, each averaging
/// `config.batch` sampled items, logging `step loss` lines.
pub(crate) fn adam_loop(
    net: &mut UNet<f32>,
    label: &str,
    config: &RunConfig,
    lr: f64,
    start_step: u64,
    rng: &mut ChaCha20Rng,
    mut item: impl FnMut(&UNet<f32>, &mut ChaCha20Rng) -> Result<(f64, Vec<Tensor<f32>>)>,
) -> Result<u64> {
    let log_path = config.out_dir.join(format!("{label}.log"));
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut adam = Adam::new(lr, net.params());
    let end = start_step + config.iterations;
    for step in start_step + 1..=end {
        let mut loss_sum = 0.0f64;
        let mut grads: Vec<Tensor<f32>> = Vec::new();
        for b in 0..config.batch {
            let (l, g) = item(net, rng)?;
            loss_sum += l;
            if b == 0 {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
        }
        if config.batch > 1 {
            let s = (1.0 / config.batch as f64) as f32;
            for g in &mut grads {
                g.scale_assign(s);
            }
        }
        let loss = loss_sum / config.batch as f64;
        let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Some).collect();
        adam.step(net.params_mut(), &refs)?;
        if step == start_step + 1 || step % config.log_every == 0 || step == end {
            writeln!(log, "{step} {loss}").map_err(|e| Error::io(&log_path, e))?;
            log::info!("{label} step {step}/{end} loss {loss:.6}");
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(end)
}

fn finish_stage(net: &UNet<f32>, stage: StageTag, step: u64, dir: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_network(net, stage, step);
    save_stage_checkpoint(dir, &ckpt)?;
    Ok(ckpt)
}

fn train_ian(config: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let samples = load_pairs_for_patch(config)?;
    let augmented: Vec<(Vec<RgbImage>, RgbImage)> = samples
        .iter()
        .map(|s| {
            Ok((
                synthesize_exposures(&s.low, DEFAULT_EXPOSURE_COUNT, DEFAULT_OVEREXPOSE_FRAC)?,
                s.high.clone(),
            ))
        })
        .collect::<Result<_>>()?;
    let (mut net, start) = init_or_resume(StageTag::Ian, config, resume)?;
    let mut rng = data_rng(config.seed, stage_stream(StageTag::Ian));
    let end = adam_loop(
        &mut net,
        "ian",
        config,
        config.learning_rate,
        start,
        &mut rng,
        |net, rng| {
            let (exposures, high) = &augmented[rng.gen_range(0..augmented.len())];
            let low = &exposures[rng.gen_range(0..exposures.len())];
            let pair = PairedSample::new("", low.clone(), high.clone())?;
            let crop = random_patch(&pair, config.patch, rng)?;
            let y_low = rgb_to_ycbcr(&crop.low).y().clone();
            let y_high = rgb_to_ycbcr(&crop.high).y().clone();
            let mut tape = Tape::new();
            let yl = tape.leaf(y_low, false);
            let yh = tape.leaf(y_high, false);
            let fwd = net.forward_tape(&mut tape, yl)?;
            let loss = ian_loss(&mut tape, yl, yh, fwd.output)?;
            collect_grads(tape, loss, &fwd, net)
        },
    )?;
    finish_stage(&net, StageTag::Ian, end, &config.out_dir)
}

/// Per-pixel standard deviation of the Poisson synthesis model.
fn poisson_sigma_map(y_high: &Plane, l_hat: &Plane, peak: f64) -> Plane {
    Plane::from_vec(
        1,
        y_high.h(),
        y_high.w(),
        y_high
            .data()
            .iter()
            .zip(l_hat.data().iter())
            .map(|(&y, &l)| {
                let (y, l) = (f64::from(y).max(0.0), f64::from(l));
                ((y * l / peak).sqrt() / (l + EPSILON)) as f32
            })
            .collect(),
    )
}

struct AnsnItem {
    y_high: Plane,
    l_hat: Plane,
    level: Plane,
}

fn train_ansn(config: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let samples = load_pairs_for_patch(config)?;
    let ian = require_stage_checkpoint(&config.out_dir, StageTag::Ian, "stage ansn")?;
    let items: Vec<AnsnItem> = samples
        .iter()
        .map(|s| {
            let l_hat = illumination_for(&ian, rgb_to_ycbcr(&s.low).y())?;
            let level = noise_level_map(&l_hat);
            Ok(AnsnItem {
                y_high: rgb_to_ycbcr(&s.high).y().clone(),
                l_hat,
                level,
            })
        })
        .collect::<Result<_>>()?;
    let (mut net, start) = init_or_resume(StageTag::Ansn, config, resume)?;
    let mut rng = data_rng(config.seed, stage_stream(StageTag::Ansn));
    let end = adam_loop(
        &mut net,
        "ansn",
        config,
        config.learning_rate,
        start,
        &mut rng,
        |net, rng| {
            let it = &items[rng.gen_range(0..items.len())];
            let crops = crop_planes(&[&it.y_high, &it.level, &it.l_hat], config.patch, rng);
            let (y_high, level, l_hat) = (&crops[0], &crops[1], &crops[2]);
            let (noisy, sigma_map) = match config.variant {
                AblationVariant::Fgn => {
                    let sigma = config.fgn_sigma;
                    let map = Plane::filled(1, y_high.h(), y_high.w(), sigma as f32);
                    (synthesize_fixed_gaussian(y_high, sigma, rng.gen())?, map)
                }
                AblationVariant::Pn => {
                    let noisy = synthesize_poisson(y_high, l_hat, config.pn_peak, rng.gen())?;
                    (noisy, poisson_sigma_map(y_high, l_hat, config.pn_peak))
                }
                _ => {
                    let s = rng.gen::<f64>() * MAX_TRAIN_STRENGTH;
                    let map = level.map(|v| (f64::from(v) * s) as f32);
                    (synthesize_noisy(y_high, &map, rng.gen())?, map)
                }
            };
            let noise = plane_sub(&noisy, y_high);
            let input = stack_planes(&[&noisy, &sigma_map])?;
            let mut tape = Tape::new();
            let x = tape.leaf(input, false);
            let target = tape.leaf(noise, false);
            let fwd = net.forward_tape(&mut tape, x)?;
            let loss = tape.mse(fwd.output, target);
            collect_grads(tape, loss, &fwd, net)
        },
    )?;
    finish_stage(&net, StageTag::Ansn, end, &config.out_dir)
}

struct NfmItem {
    candidates: Vec<Plane>,
    maps: [Plane; 3],
    y_high: Plane,
}

fn train_nfm(config: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let samples = load_pairs_for_patch(config)?;
    let ian = require_stage_checkpoint(&config.out_dir, StageTag::Ian, "stage nfm")?;
    let ansn = require_stage_checkpoint(&config.out_dir, StageTag::Ansn, "stage nfm")?;
    let ladder = StrengthLadder::default();
    let mut rng = data_rng(config.seed, stage_stream(StageTag::Nfm));
    // One hidden-strength corruption per reference, fixed for the stage;
    // every step then crops from pre-denoised candidates.
    let items: Vec<NfmItem> = samples
        .iter()
        .map(|s| {
            let y_high = rgb_to_ycbcr(&s.high).y().clone();
            let l_hat = illumination_for(&ian, rgb_to_ycbcr(&s.low).y())?;
            let level = noise_level_map(&l_hat);
            let hidden = rng.gen::<f64>() * MAX_TRAIN_STRENGTH;
            let hidden_map = level.map(|v| (f64::from(v) * hidden) as f32);
            let noisy = synthesize_noisy(&y_high, &hidden_map, rng.gen())?;
            let maps = ladder.maps(&level);
            let candidates = maps
                .iter()
                .map(|m| denoise_padded(&ansn, &noisy, m))
                .collect::<Result<Vec<_>>>()?;
            Ok(NfmItem {
                candidates,
                maps,
                y_high,
            })
        })
        .collect::<Result<_>>()?;
    let (mut net, start) = init_or_resume(StageTag::Nfm, config, resume)?;
    let end = adam_loop(
        &mut net,
        "nfm",
        config,
        config.learning_rate,
        start,
        &mut rng,
        |net, rng| {
            let it = &items[rng.gen_range(0..items.len())];
            let crops = crop_planes(
                &[
                    &it.candidates[0],
                    &it.candidates[1],
                    &it.candidates[2],
                    &it.maps[0],
                    &it.maps[1],
                    &it.maps[2],
                    &it.y_high,
                ],
                config.patch,
                rng,
            );
            let input = stack_planes(&[
                &crops[0], &crops[1], &crops[2], &crops[3], &crops[4], &crops[5],
            ])?;
            let mut tape = Tape::new();
            let x = tape.leaf(input, false);
            let target = tape.leaf(crops[6].clone(), false);
            let fwd = net.forward_tape(&mut tape, x)?;
            let loss = nfm_loss(&mut tape, fwd.output, target)?;
            collect_grads(tape, loss, &fwd, net)
        },
    )?;
    finish_stage(&net, StageTag::Nfm, end, &config.out_dir)
}

/// Input/target stacks for one paired color-adaption sample. The guide
/// channel is the reference's own luminance; the fused luminance replaces
/// it only at inference.
fn can_pair_item(pair: &PairedSample) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let low = rgb_to_ycbcr(&pair.low);
    let high = rgb_to_ycbcr(&pair.high);
    let input = stack_planes(&[low.y(), low.cb(), low.cr(), high.y()])?;
    let target = stack_planes(&[high.cb(), high.cr()])?;
    Ok((input, target))
}

/// Input/target stacks for one multi-exposure sample, cropped jointly.
fn can_me_item(
    pair: &MePair,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let crops = crop_planes(
        &[
            pair.input.y(),
            pair.input.cb(),
            pair.input.cr(),
            &pair.guide_y,
            &pair.target.cb,
            &pair.target.cr,
        ],
        size,
        rng,
    );
    let input = stack_planes(&[&crops[0], &crops[1], &crops[2], &crops[3]])?;
    let target = stack_planes(&[&crops[4], &crops[5]])?;
    Ok((input, target))
}

/// One tape pass of the color net: predicted chrominance against the
/// target, summed per-channel mean squared errors.
fn can_tape_step(
    net: &UNet<f32>,
    input: Tensor<f32>,
    target: Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(input, false);
    let t = tape.leaf(target, false);
    let fwd = net.forward_tape(&mut tape, x)?;
    let mse = tape.mse(fwd.output, t);
    let loss = tape.mul_scalar(mse, 2.0);
    collect_grads(tape, loss, &fwd, net)
}

fn train_can(config: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let samples = load_pairs_for_patch(config)?;
    let (mut net, start) = init_or_resume(StageTag::Can, config, resume)?;
    let mut rng = data_rng(config.seed, stage_stream(StageTag::Can));
    let end = adam_loop(
        &mut net,
        "can",
        config,
        config.learning_rate,
        start,
        &mut rng,
        |net, rng| {
            let sample = &samples[rng.gen_range(0..samples.len())];
            let crop = random_patch(sample, config.patch, rng)?;
            let (input, target) = can_pair_item(&crop)?;
            can_tape_step(net, input, target)
        },
    )?;
    finish_stage(&net, StageTag::Can, end, &config.out_dir)
}

/// Multi-exposure color training runs in two phases keyed off the presence
/// of `can_me.ckpt` in the output directory: the first call trains on
/// exposure sequences from scratch; later calls finetune the stored
/// parameters with the paired data appended, at the pinned finetuning rate.
fn train_can_me(config: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let base_path = stage_checkpoint_path(&config.out_dir, StageTag::CanMe);
    let finetune = base_path.is_file();
    let sequences = load_sequences_for_patch(config)?;
    let mut rng = data_rng(config.seed, stage_stream(StageTag::CanMe));

    if !finetune {
        let (mut net, start) = init_or_resume(StageTag::CanMe, config, resume)?;
        let end = adam_loop(
            &mut net,
            "can_me",
            config,
            config.learning_rate,
            start,
            &mut rng,
            |net, rng| {
                let seq = &sequences[rng.gen_range(0..sequences.len())];
                let pair = sample_me_pair(seq, rng)?;
                let (input, target) = can_me_item(&pair, config.patch, rng)?;
                can_tape_step(net, input, target)
            },
        )?;
        return finish_stage(&net, StageTag::CanMe, end, &config.out_dir);
    }

    let pairs = load_pairs_for_patch(config)?;
    let (mut net, start) = match resume {
        Some(_) => init_or_resume(StageTag::CanMe, config, resume)?,
        None => {
            let ckpt = load_checkpoint(&base_path)?;
            let step = ckpt.step;
            (ckpt.to_network()?, step)
        }
    };
    let end = adam_loop(
        &mut net,
        "can_me",
        config,
        CAN_ME_FINETUNE_LR,
        start,
        &mut rng,
        |net, rng| {
            let k = rng.gen_range(0..sequences.len() + pairs.len());
            let (input, target) = if k < sequences.len() {
                let pair = sample_me_pair(&sequences[k], rng)?;
                can_me_item(&pair, config.patch, rng)?
            } else {
                let crop = random_patch(&pairs[k - sequences.len()], config.patch, rng)?;
                can_pair_item(&crop)?
            };
            can_tape_step(net, input, target)
        },
    )?;
    finish_stage(&net, StageTag::CanMe, end, &config.out_dir)
}

/// Parses a `<stage>.log` file back into (step, loss) rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let mut fields = line.split_whitespace();
        let (Some(step), Some(loss), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Format(format!("bad log line {line:?}")));
        };
        let step = step
            .parse()
            .map_err(|_| Error::Format(format!("bad step in {line:?}")))?;
        let loss = loss
            .parse()
            .map_err(|_| Error::Format(format!("bad loss in {line:?}")))?;
        rows.push((step, loss));
    }
    Ok(rows)
}
