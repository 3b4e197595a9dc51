//! Raw forward/adjoint compute kernels shared by the autodiff tape and the
//! no-grad inference paths. Convolutions lower to im2col plus a GEMM call.
//!
//! Shape handling here is by `assert!`: callers (graph ops, network code)
//! validate user-facing contracts and only hand in consistent tensors.

use super::real::Real;
use super::tensor::Tensor;

/// Scatters a `[in_c, h, w]` tensor into the `[in_c*9, h*w]` patch matrix for
/// a 3x3 convolution with stride 1 and zero padding 1.
pub fn im2col3x3<T: Real>(x: &Tensor<T>, col: &mut [T]) {
    let (in_c, h, w) = x.shape();
    let n = h * w;
    assert_eq!(col.len(), in_c * 9 * n);
    let xd = x.data();
    for ic in 0..in_c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = ic * 9 + ky * 3 + kx;
                let dst_base = r * n;
                // destination x whose source column x + kx - 1 stays in range
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in 0..h {
                    let dst_row = dst_base + y * w;
                    let row = &mut col[dst_row..dst_row + w];
                    if y + ky < 1 || y + ky > h {
                        row.fill(T::ZERO);
                        continue;
                    }
                    let src_y = y + ky - 1;
                    let src_row = (ic * h + src_y) * w;
                    row[..x0].fill(T::ZERO);
                    row[x1..].fill(T::ZERO);
                    let src_off = src_row + x0 + kx - 1;
                    row[x0..x1].copy_from_slice(&xd[src_off..src_off + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: accumulates patch-matrix gradients back into the
/// input-shaped gradient tensor.
fn col2im3x3<T: Real>(gcol: &[T], gx: &mut Tensor<T>) {
    let (in_c, h, w) = gx.shape();
    let n = h * w;
    assert_eq!(gcol.len(), in_c * 9 * n);
    let gxd = gx.data_mut();
    for ic in 0..in_c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = ic * 9 + ky * 3 + kx;
                let src_base = r * n;
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in 0..h {
                    if y + ky < 1 || y + ky > h {
                        continue;
                    }
                    let src_y = y + ky - 1;
                    let dst_off = (ic * h + src_y) * w + x0 + kx - 1;
                    let src_off = src_base + y * w + x0;
                    for i in 0..(x1 - x0) {
                        gxd[dst_off + i] += gcol[src_off + i];
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `w` is `[out_c, in_c*9]`
/// row-major, `bias` is `[out_c]`.
pub fn conv3x3<T: Real>(x: &Tensor<T>, w: &[T], bias: &[T], out_c: usize) -> Tensor<T> {
    let (in_c, h, wd) = x.shape();
    let k = in_c * 9;
    let n = h * wd;
    assert_eq!(w.len(), out_c * k);
    assert_eq!(bias.len(), out_c);
    let mut col = vec![T::ZERO; k * n];
    im2col3x3(x, &mut col);
    let mut out = Tensor::zeros(out_c, h, wd);
    unsafe {
        T::gemm(
            out_c,
            k,
            n,
            T::ONE,
            w.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for oc in 0..out_c {
        let b = bias[oc];
        for v in &mut out.data_mut()[oc * n..(oc + 1) * n] {
            *v += b;
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub gx: Option<Tensor<T>>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
}

/// Gradients of [`conv3x3`] w.r.t. input, weights, and bias. The input
/// gradient is skipped when `need_gx` is false (first-layer leaves).
pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    out_c: usize,
    gout: &Tensor<T>,
    need_gx: bool,
) -> ConvGrads<T> {
    let (in_c, h, wd) = x.shape();
    let k = in_c * 9;
    let n = h * wd;
    assert_eq!(gout.shape(), (out_c, h, wd));
    let mut col = vec![T::ZERO; k * n];
    im2col3x3(x, &mut col);

    let mut gw = vec![T::ZERO; out_c * k];
    unsafe {
        // gw = gout [out_c, n] x col^T [n, k]
        T::gemm(
            out_c,
            n,
            k,
            T::ONE,
            gout.data().as_ptr(),
            n as isize,
            1,
            col.as_ptr(),
            1,
            n as isize,
            T::ZERO,
            gw.as_mut_ptr(),
            k as isize,
            1,
        );
    }

    let mut gb = vec![T::ZERO; out_c];
    for oc in 0..out_c {
        let mut acc = 0f64;
        for v in &gout.data()[oc * n..(oc + 1) * n] {
            acc += v.to_f64();
        }
        gb[oc] = T::from_f64(acc);
    }

    let gx = if need_gx {
        let mut gcol = vec![T::ZERO; k * n];
        unsafe {
            // gcol = w^T [k, out_c] x gout [out_c, n]
            T::gemm(
                k,
                out_c,
                n,
                T::ONE,
                w.as_ptr(),
                1,
                k as isize,
                gout.data().as_ptr(),
                n as isize,
                1,
                T::ZERO,
                gcol.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut g = Tensor::zeros(in_c, h, wd);
        col2im3x3(&gcol, &mut g);
        Some(g)
    } else {
        None
    };

    ConvGrads { gx, gw, gb }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.maxv(T::ZERO))
}

/// ReLU gradient; the subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    assert!(x.same_shape(g));
    let data = x
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
        .collect();
    let (c, h, w) = x.shape();
    Tensor::from_vec(c, h, w, data)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::ONE / (T::ONE + (-v).exp()))
}

/// Sigmoid gradient expressed through the forward output `s`.
pub fn sigmoid_backward<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    assert!(s.same_shape(g));
    let data = s
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&sv, &gv)| gv * sv * (T::ONE - sv))
        .collect();
    let (c, h, w) = s.shape();
    Tensor::from_vec(c, h, w, data)
}

/// 2x2 max pooling with stride 2. Requires even spatial dims. Returns the
/// pooled tensor and, per output element, the flat input index of its argmax
/// (first maximum in scan order wins, which keeps ties deterministic).
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 requires even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    let xd = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + oy * 2) * w + ox * 2;
                let mut best = base;
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let cand = base + dy * w + dx;
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2x2_backward<T: Real>(
    g: &Tensor<T>,
    idx: &[u32],
    in_shape: (usize, usize, usize),
) -> Tensor<T> {
    let (c, h, w) = in_shape;
    assert_eq!(g.len(), idx.len());
    let mut gx = Tensor::zeros(c, h, w);
    let gxd = gx.data_mut();
    for (o, &i) in idx.iter().enumerate() {
        gxd[i as usize] += g.data()[o];
    }
    gx
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, h * 2, w * 2);
    for ch in 0..c {
        for y in 0..h * 2 {
            let src_row = (ch * h + y / 2) * w;
            let dst_row = (ch * h * 2 + y) * (w * 2);
            for x_ in 0..w * 2 {
                out.data_mut()[dst_row + x_] = x.data()[src_row + x_ / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = g.shape();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h2 {
            let dst_row = (ch * h + y / 2) * w;
            let src_row = (ch * h2 + y) * w2;
            for x_ in 0..w2 {
                gx.data_mut()[dst_row + x_ / 2] += g.data()[src_row + x_];
            }
        }
    }
    gx
}

/// Channel concatenation, `a` first.
pub fn concat_c<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h(), a.w()), (b.h(), b.w()), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.c() + b.c(), a.h(), a.w(), data)
}

pub fn concat_c_backward<T: Real>(g: &Tensor<T>, c_a: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = g.shape();
    assert!(c_a < c);
    let split = c_a * h * w;
    let ga = Tensor::from_vec(c_a, h, w, g.data()[..split].to_vec());
    let gb = Tensor::from_vec(c - c_a, h, w, g.data()[split..].to_vec());
    (ga, gb)
}

/// Forward difference along x: `out[c,y,x] = p[c,y,x+1] - p[c,y,x]`, zero in
/// the last column.
pub fn dx<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = p.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x_ in 0..w - 1 {
                out.data_mut()[row + x_] = p.data()[row + x_ + 1] - p.data()[row + x_];
            }
        }
    }
    out
}

pub fn dx_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = g.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x_ in 0..w - 1 {
                let gv = g.data()[row + x_];
                out.data_mut()[row + x_ + 1] += gv;
                out.data_mut()[row + x_] -= gv;
            }
        }
    }
    out
}

/// Forward difference along y: `out[c,y,x] = p[c,y+1,x] - p[c,y,x]`, zero in
/// the last row.
pub fn dy<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = p.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h - 1 {
            let row = (ch * h + y) * w;
            for x_ in 0..w {
                out.data_mut()[row + x_] = p.data()[row + w + x_] - p.data()[row + x_];
            }
        }
    }
    out
}

pub fn dy_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = g.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h - 1 {
            let row = (ch * h + y) * w;
            for x_ in 0..w {
                let gv = g.data()[row + x_];
                out.data_mut()[row + w + x_] += gv;
                out.data_mut()[row + x_] -= gv;
            }
        }
    }
    out
}

/// Symmetric Gaussian taps, normalized to sum 1; computed in f64 then cast.
pub fn gaussian_taps<T: Real>(n: usize, sigma: f64) -> Vec<T> {
    assert!(n >= 1 && sigma > 0.0);
    let c = (n - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::from_f64(v / s)).collect()
}

fn hpass<T: Real>(x: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let n = taps.len();
    assert!(w >= n);
    let ow = w - n + 1;
    let mut out = Tensor::zeros(c, h, ow);
    for ch in 0..c {
        for y in 0..h {
            let row = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let orow = (ch * h + y) * ow;
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for (i, &t) in taps.iter().enumerate() {
                    acc = t.mul_add(row[ox + i], acc);
                }
                out.data_mut()[orow + ox] = acc;
            }
        }
    }
    out
}

fn vpass<T: Real>(x: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let n = taps.len();
    assert!(h >= n);
    let oh = h - n + 1;
    let mut out = Tensor::zeros(c, oh, w);
    for ch in 0..c {
        for oy in 0..oh {
            let orow = (ch * oh + oy) * w;
            for (i, &t) in taps.iter().enumerate() {
                let srow = (ch * h + oy + i) * w;
                for x_ in 0..w {
                    out.data_mut()[orow + x_] = t.mul_add(x.data()[srow + x_], out.data()[orow + x_]);
                }
            }
        }
    }
    out
}

/// Separable valid-mode blur: output shape shrinks by `taps.len() - 1` in
/// each spatial dimension.
pub fn blur_valid<T: Real>(x: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    vpass(&hpass(x, taps), taps)
}

fn hpass_adjoint<T: Real>(g: &Tensor<T>, taps: &[T], w_in: usize) -> Tensor<T> {
    let (c, h, ow) = g.shape();
    let n = taps.len();
    assert_eq!(ow + n - 1, w_in);
    let mut out = Tensor::zeros(c, h, w_in);
    for ch in 0..c {
        for y in 0..h {
            let grow = (ch * h + y) * ow;
            let orow = (ch * h + y) * w_in;
            for ox in 0..ow {
                let gv = g.data()[grow + ox];
                for (i, &t) in taps.iter().enumerate() {
                    out.data_mut()[orow + ox + i] = t.mul_add(gv, out.data()[orow + ox + i]);
                }
            }
        }
    }
    out
}

fn vpass_adjoint<T: Real>(g: &Tensor<T>, taps: &[T], h_in: usize) -> Tensor<T> {
    let (c, oh, w) = g.shape();
    let n = taps.len();
    assert_eq!(oh + n - 1, h_in);
    let mut out = Tensor::zeros(c, h_in, w);
    for ch in 0..c {
        for oy in 0..oh {
            let grow = (ch * oh + oy) * w;
            for (i, &t) in taps.iter().enumerate() {
                let orow = (ch * h_in + oy + i) * w;
                for x_ in 0..w {
                    out.data_mut()[orow + x_] = t.mul_add(g.data()[grow + x_], out.data()[orow + x_]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`] for an input of the given spatial size.
pub fn blur_valid_adjoint<T: Real>(
    g: &Tensor<T>,
    taps: &[T],
    h_in: usize,
    w_in: usize,
) -> Tensor<T> {
    let gh = vpass_adjoint(g, taps, h_in);
    hpass_adjoint(&gh, taps, w_in)
}

/// Reflective padding on the bottom/right edges, mirroring without repeating
/// the border sample. Requires `pad_b <= h - 1` and `pad_r <= w - 1`.
pub fn pad_reflect_br<T: Real>(x: &Tensor<T>, pad_b: usize, pad_r: usize) -> Tensor<T> {
    let (c, h, w) = x.shape();
    assert!(pad_b + 1 <= h && pad_r + 1 <= w, "padding exceeds mirror range");
    let (oh, ow) = (h + pad_b, w + pad_r);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x_ in 0..ow {
                let sx = if x_ < w { x_ } else { 2 * w - 2 - x_ };
                let v = x.data()[(ch * h + sy) * w + sx];
                out.data_mut()[(ch * oh + y) * ow + x_] = v;
            }
        }
    }
    out
}

/// Crops the window starting at `(y0, x0)` with the given size.
pub fn crop<T: Real>(x: &Tensor<T>, y0: usize, x0: usize, ch_: usize, cw: usize) -> Tensor<T> {
    let (c, h, w) = x.shape();
    assert!(y0 + ch_ <= h && x0 + cw <= w, "crop window out of range");
    let mut out = Tensor::zeros(c, ch_, cw);
    for chn in 0..c {
        for y in 0..ch_ {
            let src = (chn * h + y0 + y) * w + x0;
            let dst = (chn * ch_ + y) * cw;
            out.data_mut()[dst..dst + cw].copy_from_slice(&x.data()[src..src + cw]);
        }
    }
    out
}

/// Mirrors the tensor horizontally (flips the x axis).
pub fn hflip<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x_ in 0..w {
                out.data_mut()[row + x_] = x.data()[row + w - 1 - x_];
            }
        }
    }
    out
}
