//! Finite-difference gradient verification.
//!
//! Instantiates the shared generic network/tape code at `f64` and compares
//! analytic parameter gradients of an MSE objective against central
//! differences. The relative-error denominator is floored: below the floor,
//! central differences at the contractual step are dominated by truncation
//! noise and say nothing about the analytic value.
//!
//! A central difference only estimates a derivative where the loss is smooth
//! across the whole `[-h, +h]` probe. ReLU and max-pool make the loss
//! piecewise smooth, so a coordinate whose perturbation flips any ReLU sign
//! or pool argmax is sampled again instead of scored; the activation traces
//! of the three probe points decide. Skips are counted in the report.

use rand::Rng;

use super::graph::Tape;
use super::network::{NetworkSpec, UNet};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Denominator floor for the relative-error measure.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    /// Sampled coordinates discarded because the probe crossed a ReLU or
    /// pool-argmax switch.
    pub coords_skipped: usize,
    pub max_rel_err: f64,
}

fn mse_f64(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert!(a.same_shape(b));
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    s / a.len() as f64
}

/// Checks `d mse(net(input), target) / d theta` on `n_coords` random
/// parameter coordinates with central differences of step `h`.
pub fn check_unet_gradients(
    spec: NetworkSpec,
    seed: u64,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    n_coords: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut net = UNet::<f64>::init(spec, seed)?;

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let fw = net.forward_tape(&mut tape, x)?;
    let t = tape.leaf(target.clone(), false);
    let loss = tape.mse(fw.output, t);
    let grads = tape.backward(loss)?;

    let analytic: Vec<Option<Tensor<f64>>> = fw
        .params
        .iter()
        .map(|&pid| grads.get(pid).cloned())
        .collect();

    let (_, base_trace) = net.forward_traced(input)?;

    let n_params = net.params().len();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let attempt_cap = n_coords.saturating_mul(50);
    for attempt in 0.. {
        if checked == n_coords {
            break;
        }
        if attempt >= attempt_cap {
            return Err(Error::Numeric(format!(
                "gradient check exhausted {attempt_cap} coordinate draws \
                 ({checked} scored, {skipped} kink-crossing skips)"
            )));
        }
        let pi = rng.gen_range(0..n_params);
        let ei = rng.gen_range(0..net.params()[pi].len());
        let a = analytic[pi]
            .as_ref()
            .map(|g| g.data()[ei])
            .unwrap_or(0.0);

        let orig = net.params()[pi].data()[ei];
        net.params_mut()[pi].data_mut()[ei] = orig + h;
        let (out_up, trace_up) = net.forward_traced(input)?;
        net.params_mut()[pi].data_mut()[ei] = orig - h;
        let (out_dn, trace_dn) = net.forward_traced(input)?;
        net.params_mut()[pi].data_mut()[ei] = orig;

        if trace_up != base_trace || trace_dn != base_trace {
            skipped += 1;
            continue;
        }

        let up = mse_f64(&out_up, target);
        let dn = mse_f64(&out_dn, target);
        let fd = (up - dn) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    Ok(GradCheckReport {
        coords_checked: checked,
        coords_skipped: skipped,
        max_rel_err: max_rel,
    })
}
