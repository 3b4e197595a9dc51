//! Illumination adjustment: estimate the relative illumination difference
//! between a low-light luminance and its reference, and brighten by dividing
//! through the estimate.
//!
//! The illumination map is a sigmoid output in (0, 1); division always adds
//! [`EPSILON`](crate::EPSILON) to the denominator. The adjusted luminance is
//! deliberately not clamped: downstream denoising consumes the raw values.

use crate::imagecore::Plane;
use crate::nnkit::{FinalActivation, Real, Tape, Tensor, UNet, ValueId};
use crate::{Error, Result, EPSILON};

/// Smoothness term weight.
pub const ALPHA: f64 = 4.0;
/// Gradient-consistency term weight.
pub const BETA: f64 = 0.5;

fn validate_ian_spec<T: Real>(net: &UNet<T>) -> Result<()> {
    let s = net.spec();
    if s.in_channels != 1 || s.out_channels != 1 || s.final_activation != FinalActivation::Sigmoid {
        return Err(Error::Spec(format!(
            "illumination network must be 1-in/1-out with sigmoid head, got {}-in/{}-out {:?}",
            s.in_channels, s.out_channels, s.final_activation
        )));
    }
    Ok(())
}

/// One forward pass of the illumination network on a luminance plane.
pub fn estimate_illumination(net: &UNet<f32>, y_low: &Plane) -> Result<Plane> {
    validate_ian_spec(net)?;
    net.forward(y_low)
}

/// `y_low / (l_hat + EPSILON)`, elementwise and unclamped.
pub fn adjust_luminance(y_low: &Plane, l_hat: &Plane) -> Result<Plane> {
    if !y_low.same_shape(l_hat) {
        return Err(Error::Shape(format!(
            "luminance {:?} vs illumination {:?}",
            y_low.shape(),
            l_hat.shape()
        )));
    }
    let data = y_low
        .data()
        .iter()
        .zip(l_hat.data().iter())
        .map(|(&y, &l)| (f64::from(y) / (f64::from(l) + EPSILON)) as f32)
        .collect();
    Ok(Tensor::from_vec(1, y_low.h(), y_low.w(), data))
}

/// Builds the illumination training objective on the tape:
/// fidelity `mse(y_low/(l_hat+eps), y_high)`, plus `ALPHA` times the mean
/// (over both gradient directions) of `|grad l_hat| / (|grad y_low| + eps)`,
/// plus `BETA` times the mean of `|grad l_hat - grad y_low|` per direction.
/// `y_low` and `y_high` are expected to be constant leaves; only `l_hat`
/// needs gradients.
pub fn ian_loss<T: Real>(
    tape: &mut Tape<T>,
    y_low: ValueId,
    y_high: ValueId,
    l_hat: ValueId,
) -> Result<ValueId> {
    let denom = tape.add_scalar(l_hat, EPSILON);
    let adjusted = tape.div(y_low, denom);
    let fidelity = tape.mse(adjusted, y_high);

    let dx_l = tape.dx(l_hat);
    let dy_l = tape.dy(l_hat);
    let dx_y = tape.dx(y_low);
    let dy_y = tape.dy(y_low);

    let direction_means = |tape: &mut Tape<T>, dl: ValueId, dy: ValueId| {
        let abs_dl = tape.abs(dl);
        let abs_dy = tape.abs(dy);
        let w_den = tape.add_scalar(abs_dy, EPSILON);
        let weighted = tape.div(abs_dl, w_den);
        let smooth = tape.mean(weighted);
        let diff = tape.sub(dl, dy);
        let abs_diff = tape.abs(diff);
        let consist = tape.mean(abs_diff);
        (smooth, consist)
    };
    let (smooth_x, consist_x) = direction_means(tape, dx_l, dx_y);
    let (smooth_y, consist_y) = direction_means(tape, dy_l, dy_y);

    let smooth_sum = tape.add(smooth_x, smooth_y);
    let smoothness = tape.mul_scalar(smooth_sum, ALPHA / 2.0);
    let consist_sum = tape.add(consist_x, consist_y);
    let consistency = tape.mul_scalar(consist_sum, BETA / 2.0);

    for (name, id) in [
        ("fidelity", fidelity),
        ("smoothness", smoothness),
        ("gradient consistency", consistency),
    ] {
        if !tape.scalar(id).to_f64().is_finite() {
            return Err(Error::Numeric(format!(
                "illumination loss {name} term is not finite"
            )));
        }
    }

    let partial = tape.add(fidelity, smoothness);
    Ok(tape.add(partial, consistency))
}
