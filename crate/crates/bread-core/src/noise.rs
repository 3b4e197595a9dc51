//! Illumination-guided noise synthesis, the adaptive noise suppression
//! network, ablation noise models, and the noise fusion module.
//!
//! The noise level map A = exp(-l_hat) carries per-pixel Gaussian standard
//! deviations in image-value units. Denoising runs at a ladder of strengths
//! {0, 0.05, 0.1} * A and the fusion network merges the candidates. All
//! synthesis is seeded and deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::imagecore::{stack_planes, Plane};
use crate::nnkit::{FinalActivation, Real, Tape, Tensor, UNet, ValueId};
use crate::{Error, Result, EPSILON};

const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;
const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Denoising strengths applied to the noise level map, in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct StrengthLadder {
    scales: [f64; 3],
}

impl Default for StrengthLadder {
    fn default() -> Self {
        StrengthLadder {
            scales: [0.0, 0.05, 0.1],
        }
    }
}

impl StrengthLadder {
    pub fn new(scales: [f64; 3]) -> Result<Self> {
        if scales[0] < 0.0 || scales[0] >= scales[1] || scales[1] >= scales[2] {
            return Err(Error::Domain(format!(
                "ladder scales must be nonnegative and strictly increasing, got {scales:?}"
            )));
        }
        Ok(StrengthLadder { scales })
    }

    pub fn scales(&self) -> &[f64; 3] {
        &self.scales
    }

    /// The three scaled noise level maps.
    pub fn maps(&self, level_map: &Plane) -> [Plane; 3] {
        self.scales
            .map(|s| level_map.map(|v| (f64::from(v) * s) as f32))
    }
}

/// Per-pixel noise level `exp(-l_hat)`: darker regions (small illumination)
/// get larger levels.
pub fn noise_level_map(l_hat: &Plane) -> Plane {
    l_hat.map(|v| (-f64::from(v)).exp() as f32)
}

/// Adds zero-mean Gaussian noise with per-pixel standard deviation
/// `sigma_map`; output is unclamped and deterministic per seed.
pub fn synthesize_noisy(y_high: &Plane, sigma_map: &Plane, seed: u64) -> Result<Plane> {
    if !y_high.same_shape(sigma_map) {
        return Err(Error::Shape(format!(
            "luminance {:?} vs sigma map {:?}",
            y_high.shape(),
            sigma_map.shape()
        )));
    }
    if sigma_map.data().iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::Domain(
            "sigma map must be nonnegative and finite".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = y_high
        .data()
        .iter()
        .zip(sigma_map.data().iter())
        .map(|(&y, &s)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (f64::from(y) + f64::from(s) * z) as f32
        })
        .collect();
    Ok(Tensor::from_vec(1, y_high.h(), y_high.w(), data))
}

/// Gaussian noise with one constant standard deviation (ablation model).
pub fn synthesize_fixed_gaussian(y_high: &Plane, sigma: f64, seed: u64) -> Result<Plane> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be nonnegative, got {sigma}")));
    }
    let map = Plane::filled(1, y_high.h(), y_high.w(), sigma as f32);
    synthesize_noisy(y_high, &map, seed)
}

/// Signal-dependent noise (ablation model): darken by `l_hat`, corrupt with
/// a Poisson process at the given photon peak, then re-brighten by dividing
/// out the illumination.
pub fn synthesize_poisson(y_high: &Plane, l_hat: &Plane, peak: f64, seed: u64) -> Result<Plane> {
    if !y_high.same_shape(l_hat) {
        return Err(Error::Shape(format!(
            "luminance {:?} vs illumination {:?}",
            y_high.shape(),
            l_hat.shape()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = y_high
        .data()
        .iter()
        .zip(l_hat.data().iter())
        .map(|(&y, &l)| {
            let rate = f64::from(y) * f64::from(l) * peak;
            let count = if rate > 0.0 {
                Poisson::new(rate).expect("positive finite rate").sample(&mut rng)
            } else {
                0.0
            };
            (count / peak / (f64::from(l) + EPSILON)) as f32
        })
        .collect();
    Ok(Tensor::from_vec(1, y_high.h(), y_high.w(), data))
}

fn validate_ansn_spec<T: Real>(net: &UNet<T>) -> Result<()> {
    let s = net.spec();
    if s.in_channels != 2 || s.out_channels != 1 || s.final_activation != FinalActivation::None {
        return Err(Error::Spec(format!(
            "noise suppression network must be 2-in/1-out with linear head, got {}-in/{}-out {:?}",
            s.in_channels, s.out_channels, s.final_activation
        )));
    }
    Ok(())
}

/// Predicted noise residual for a luminance conditioned on a noise level
/// map; the head is linear, so the residual is unbounded.
pub fn ansn_predict(net: &UNet<f32>, y: &Plane, sigma_map: &Plane) -> Result<Plane> {
    validate_ansn_spec(net)?;
    let input = stack_planes(&[y, sigma_map])?;
    net.forward(&input)
}

/// Mean squared error between the predicted residual and the sampled noise.
pub fn ansn_loss(pred_noise: &Plane, true_noise: &Plane) -> Result<f64> {
    if !pred_noise.same_shape(true_noise) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs noise {:?}",
            pred_noise.shape(),
            true_noise.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred_noise.data().iter().zip(true_noise.data().iter()) {
        let d = f64::from(p) - f64::from(t);
        acc += d * d;
    }
    let loss = acc / pred_noise.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("noise suppression loss is not finite".into()));
    }
    Ok(loss)
}

/// `y - predicted_residual`, unclamped.
pub fn denoise(net: &UNet<f32>, y: &Plane, sigma_map: &Plane) -> Result<Plane> {
    let residual = ansn_predict(net, y, sigma_map)?;
    let data = y
        .data()
        .iter()
        .zip(residual.data().iter())
        .map(|(&a, &r)| a - r)
        .collect();
    Ok(Tensor::from_vec(1, y.h(), y.w(), data))
}

fn validate_nfm_spec<T: Real>(net: &UNet<T>) -> Result<()> {
    let s = net.spec();
    if s.in_channels != 6 || s.out_channels != 1 || s.final_activation != FinalActivation::Sigmoid
    {
        return Err(Error::Spec(format!(
            "fusion network must be 6-in/1-out with sigmoid head, got {}-in/{}-out {:?}",
            s.in_channels, s.out_channels, s.final_activation
        )));
    }
    Ok(())
}

/// Fuses three denoised candidates conditioned on their ladder maps. The
/// channel order is contractual: candidates first (ladder order), then the
/// matching noise level maps.
pub fn fuse(net: &UNet<f32>, candidates: &[Plane], ladder_maps: &[Plane]) -> Result<Plane> {
    validate_nfm_spec(net)?;
    if candidates.len() != 3 || ladder_maps.len() != 3 {
        return Err(Error::Shape(format!(
            "fusion takes exactly 3 candidates and 3 maps, got {} and {}",
            candidates.len(),
            ladder_maps.len()
        )));
    }
    let input = stack_planes(&[
        &candidates[0],
        &candidates[1],
        &candidates[2],
        &ladder_maps[0],
        &ladder_maps[1],
        &ladder_maps[2],
    ])?;
    net.forward(&input)
}

/// Mean structural-similarity score over all valid 11-tap Gaussian windows
/// (sigma 1.5, K1=0.01, K2=0.03, unit data range), built on the tape.
fn ssim_mean_tape<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
    let mu_a = tape.blur_valid(a, SSIM_TAPS, SSIM_SIGMA);
    let mu_b = tape.blur_valid(b, SSIM_TAPS, SSIM_SIGMA);
    let a2 = tape.mul(a, a);
    let b2 = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_a2 = tape.blur_valid(a2, SSIM_TAPS, SSIM_SIGMA);
    let e_b2 = tape.blur_valid(b2, SSIM_TAPS, SSIM_SIGMA);
    let e_ab = tape.blur_valid(ab, SSIM_TAPS, SSIM_SIGMA);
    let mu_a2 = tape.mul(mu_a, mu_a);
    let mu_b2 = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_a2, mu_a2);
    let var_b = tape.sub(e_b2, mu_b2);
    let cov = tape.sub(e_ab, mu_ab);

    let mu_ab2 = tape.mul_scalar(mu_ab, 2.0);
    let n1 = tape.add_scalar(mu_ab2, SSIM_C1);
    let cov2 = tape.mul_scalar(cov, 2.0);
    let n2 = tape.add_scalar(cov2, SSIM_C2);
    let num = tape.mul(n1, n2);
    let mu_sum = tape.add(mu_a2, mu_b2);
    let d1 = tape.add_scalar(mu_sum, SSIM_C1);
    let var_sum = tape.add(var_a, var_b);
    let d2 = tape.add_scalar(var_sum, SSIM_C2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    tape.mean(map)
}

/// Fusion objective on the tape: `mse(y_nf, y_high) + (1 - mean SSIM)`.
/// Requires both sides of the plane to span at least one SSIM window.
pub fn nfm_loss<T: Real>(tape: &mut Tape<T>, y_nf: ValueId, y_high: ValueId) -> Result<ValueId> {
    let (c, h, w) = tape.value(y_nf).shape();
    if c != 1 || !tape.value(y_high).same_shape(tape.value(y_nf)) {
        return Err(Error::Shape(format!(
            "fusion loss takes matching single-channel planes, got {:?} vs {:?}",
            tape.value(y_nf).shape(),
            tape.value(y_high).shape()
        )));
    }
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Size(format!(
            "fusion loss needs at least {SSIM_TAPS}x{SSIM_TAPS} pixels, got {h}x{w}"
        )));
    }
    let mse = tape.mse(y_nf, y_high);
    let ssim = ssim_mean_tape(tape, y_nf, y_high);
    let neg = tape.mul_scalar(ssim, -1.0);
    let dissim = tape.add_scalar(neg, 1.0);
    let total = tape.add(mse, dissim);
    if !tape.scalar(total).to_f64().is_finite() {
        return Err(Error::Numeric("fusion loss is not finite".into()));
    }
    Ok(total)
}
