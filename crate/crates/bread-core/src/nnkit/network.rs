//! The shared U-shaped network: three encoder levels (two 3x3 convolutions
//! with ReLU each, then 2x2 max-pool), a two-convolution bottleneck, and
//! three decoder levels (nearest x2 upsample, concatenation with the matching
//! encoder skip, two convolutions), closed by a final 3x3 convolution and an
//! optional sigmoid. Channel widths double per level from `base_channels`,
//! capped at `max_channels`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Tape, ValueId};
use super::kernels as k;
use super::real::Real;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalActivation {
    Sigmoid,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub depth: usize,
    pub final_activation: FinalActivation,
}

impl NetworkSpec {
    /// Default topology (base 32, cap 128, three levels) with the given i/o.
    pub fn with_io(in_channels: usize, out_channels: usize, final_activation: FinalActivation) -> Self {
        NetworkSpec {
            in_channels,
            out_channels,
            base_channels: 32,
            max_channels: 128,
            depth: 3,
            final_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::Spec("max_channels must be >= base_channels".into()));
        }
        if self.depth != 3 {
            return Err(Error::Spec(format!(
                "depth is fixed at 3 down/up levels, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Channel width at encoder/decoder level `lev`; `lev == depth` is the
    /// bottleneck.
    fn level_channels(&self, lev: usize) -> usize {
        (self.base_channels << lev).min(self.max_channels)
    }

    /// Spatial divisibility required of inputs.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

struct ConvDef {
    name: String,
    in_c: usize,
    out_c: usize,
}

/// Convolution layers in fixed topological order. This ordering is the
/// checkpoint wire order and the parameter-vector order.
fn conv_defs(spec: &NetworkSpec) -> Vec<ConvDef> {
    let mut defs = Vec::new();
    let mut push = |name: String, in_c: usize, out_c: usize| {
        defs.push(ConvDef { name, in_c, out_c });
    };
    for lev in 0..spec.depth {
        let in_c = if lev == 0 {
            spec.in_channels
        } else {
            spec.level_channels(lev - 1)
        };
        let out_c = spec.level_channels(lev);
        push(format!("enc{lev}.conv0"), in_c, out_c);
        push(format!("enc{lev}.conv1"), out_c, out_c);
    }
    let bott = spec.level_channels(spec.depth);
    push(
        "bottleneck.conv0".into(),
        spec.level_channels(spec.depth - 1),
        bott,
    );
    push("bottleneck.conv1".into(), bott, bott);
    for lev in (0..spec.depth).rev() {
        let up_c = if lev == spec.depth - 1 {
            bott
        } else {
            spec.level_channels(lev + 1)
        };
        let out_c = spec.level_channels(lev);
        push(format!("dec{lev}.conv0"), up_c + out_c, out_c);
        push(format!("dec{lev}.conv1"), out_c, out_c);
    }
    push("final".into(), spec.level_channels(0), spec.out_channels);
    defs
}

/// U-shaped network with parameters stored in checkpoint wire order:
/// `[weight, bias]` per convolution. Weights are carried as
/// `(1, out_c, in_c*9)` tensors, biases as `(1, 1, out_c)`.
#[derive(Clone)]
pub struct UNet<T: Real> {
    spec: NetworkSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Real> std::fmt::Debug for UNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("spec", &self.spec)
            .field("param_tensors", &self.params.len())
            .finish()
    }
}

pub struct TapeForward {
    pub output: ValueId,
    /// One id per parameter tensor, aligned with [`UNet::params`].
    pub params: Vec<ValueId>,
}

/// Discrete state of one forward pass: the on/off pattern of every ReLU and
/// the argmax choice of every pool window. Two passes with equal traces ran
/// the same smooth program, so a finite difference between them estimates a
/// true derivative; a trace change means a kink was crossed.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct ActivationTrace {
    relu_on: Vec<Vec<bool>>,
    pool_idx: Vec<Vec<u32>>,
}

impl<T: Real> UNet<T> {
    /// Fan-in-scaled normal initialization (He scheme) of all convolution
    /// weights from the seed; biases start at zero.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for def in conv_defs(&spec) {
            let fan_in = def.in_c * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data: Vec<T> = (0..def.out_c * fan_in)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            params.push(Tensor::from_vec(1, def.out_c, fan_in, data));
            params.push(Tensor::zeros(1, 1, def.out_c));
        }
        Ok(UNet { spec, params })
    }

    /// Rebuilds a network from parameter tensors already in wire order.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let defs = conv_defs(&spec);
        if params.len() != defs.len() * 2 {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, got {}",
                defs.len() * 2,
                params.len()
            )));
        }
        for (i, def) in defs.iter().enumerate() {
            let w = &params[2 * i];
            let b = &params[2 * i + 1];
            if w.shape() != (1, def.out_c, def.in_c * 9) {
                return Err(Error::Spec(format!(
                    "{}.weight has shape {:?}, expected (1, {}, {})",
                    def.name,
                    w.shape(),
                    def.out_c,
                    def.in_c * 9
                )));
            }
            if b.shape() != (1, 1, def.out_c) {
                return Err(Error::Spec(format!(
                    "{}.bias has shape {:?}, expected (1, 1, {})",
                    def.name,
                    b.shape(),
                    def.out_c
                )));
            }
        }
        Ok(UNet { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// `(name, logical dims, tensor)` triples in wire order. Weights report
    /// `[out_c, in_c, 3, 3]`, biases `[out_c]`.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &Tensor<T>)> {
        let defs = conv_defs(&self.spec);
        let mut out = Vec::with_capacity(defs.len() * 2);
        for (i, def) in defs.iter().enumerate() {
            out.push((
                format!("{}.weight", def.name),
                vec![def.out_c, def.in_c, 3, 3],
                &self.params[2 * i],
            ));
            out.push((
                format!("{}.bias", def.name),
                vec![def.out_c],
                &self.params[2 * i + 1],
            ));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            spec: self.spec,
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn validate_input(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, spec expects {}",
                c, self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Size(format!(
                "input {h}x{w} must have both sides divisible by {m}"
            )));
        }
        Ok(())
    }

    fn conv_relu_plain(
        &self,
        x: &Tensor<T>,
        def_idx: usize,
        trace: Option<&mut ActivationTrace>,
    ) -> Tensor<T> {
        let w = &self.params[2 * def_idx];
        let b = &self.params[2 * def_idx + 1];
        let out = k::conv3x3(x, w.data(), b.data(), w.h());
        if let Some(t) = trace {
            t.relu_on
                .push(out.data().iter().map(|&v| v > T::ZERO).collect());
        }
        k::relu(&out)
    }

    /// No-grad forward pass; keeps only the skip tensors alive.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_impl(x, None)
    }

    /// No-grad forward pass that also records the activation trace.
    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ActivationTrace)> {
        let mut trace = ActivationTrace::default();
        let out = self.forward_impl(x, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_impl(
        &self,
        x: &Tensor<T>,
        mut trace: Option<&mut ActivationTrace>,
    ) -> Result<Tensor<T>> {
        self.validate_input(x.shape())?;
        let depth = self.spec.depth;
        let mut di = 0;
        let mut cur = x.clone();
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
        for _ in 0..depth {
            cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
            di += 1;
            cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
            di += 1;
            let (pooled, idx) = k::maxpool2x2(&cur);
            if let Some(t) = trace.as_deref_mut() {
                t.pool_idx.push(idx);
            }
            skips.push(cur);
            cur = pooled;
        }
        cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
        di += 1;
        cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
        di += 1;
        for lev in (0..depth).rev() {
            let up = k::upsample2x(&cur);
            cur = k::concat_c(&up, &skips[lev]);
            cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
            di += 1;
            cur = self.conv_relu_plain(&cur, di, trace.as_deref_mut());
            di += 1;
        }
        let wf = &self.params[2 * di];
        let bf = &self.params[2 * di + 1];
        let mut out = k::conv3x3(&cur, wf.data(), bf.data(), wf.h());
        if self.spec.final_activation == FinalActivation::Sigmoid {
            out = k::sigmoid(&out);
        }
        Ok(out)
    }

    /// Differentiable forward pass. Parameters are inserted as grad-tracked
    /// leaves in wire order; the walk matches [`UNet::forward`] op for op, so
    /// both paths produce bitwise-identical values.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: ValueId) -> Result<TapeForward> {
        self.validate_input(tape.value(x).shape())?;
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        let conv_relu = |tape: &mut Tape<T>, x: ValueId, di: usize| {
            let c = tape.conv3x3(x, param_ids[2 * di], param_ids[2 * di + 1]);
            tape.relu(c)
        };
        let depth = self.spec.depth;
        let mut di = 0;
        let mut cur = x;
        let mut skips = Vec::with_capacity(depth);
        for _ in 0..depth {
            cur = conv_relu(tape, cur, di);
            di += 1;
            cur = conv_relu(tape, cur, di);
            di += 1;
            skips.push(cur);
            cur = tape.maxpool2(cur);
        }
        cur = conv_relu(tape, cur, di);
        di += 1;
        cur = conv_relu(tape, cur, di);
        di += 1;
        for lev in (0..depth).rev() {
            let up = tape.upsample2(cur);
            cur = tape.concat_c(up, skips[lev]);
            cur = conv_relu(tape, cur, di);
            di += 1;
            cur = conv_relu(tape, cur, di);
            di += 1;
        }
        let mut out = tape.conv3x3(cur, param_ids[2 * di], param_ids[2 * di + 1]);
        if self.spec.final_activation == FinalActivation::Sigmoid {
            out = tape.sigmoid(out);
        }
        Ok(TapeForward {
            output: out,
            params: param_ids,
        })
    }
}
