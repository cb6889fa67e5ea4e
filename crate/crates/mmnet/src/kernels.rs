//! Raw numeric kernels behind the tape operations.
//!
//! Convolution, transposed convolution and 4-D correlation are lowered to
//! GEMM (`im2col`/`col2im`); the bicubic upscaler runs as separable 1-D
//! passes with precomputed tap tables. Forward kernels and their adjoints
//! live side by side so the tape stays a thin dispatcher.

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = n + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (n - 1) * stride + k;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    input: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), c_in * kh * kw * ho * wo);
    let n = ho * wo;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                // Valid output columns: 0 <= ox*stride + kx*dil - pad < w.
                let (lo, hi) = valid_range(wo, w, stride, kx * dil, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    let out_row = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(E::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(E::ZERO);
                    out_row[hi..].fill(E::ZERO);
                    if hi <= lo {
                        continue;
                    }
                    let ix0 = lo * stride + kx * dil - pad;
                    if stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (slot, v) in out_row[lo..hi]
                            .iter_mut()
                            .zip(src[ix0..].iter().step_by(stride))
                        {
                            *slot = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o` in `0..no` with `0 <= o*stride + off - pad < extent`,
/// as a half-open range.
fn valid_range(no: usize, extent: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride).min(no)
    };
    let hi = if extent + pad <= off {
        lo
    } else {
        ((extent + pad - off - 1) / stride + 1).min(no)
    };
    (lo, hi.max(lo).min(no))
}

/// Adjoint of [`im2col`]: scatter-adds column values back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    cols: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
    dinput: &mut [E],
) {
    let n = ho * wo;
    for c in 0..c_in {
        let plane = &mut dinput[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * n;
                let (lo, hi) = valid_range(wo, w, stride, kx * dil, pad);
                if hi <= lo {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let ix0 = lo * stride + kx * dil - pad;
                    if stride == 1 {
                        for (d, s) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[ix0..]
                            .iter_mut()
                            .step_by(stride)
                            .zip(&src[lo..hi])
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 stride-1 unpadded convolutions are plain GEMMs on the raw input.
fn is_pointwise(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && stride == 1 && pad == 0
}

/// View of the first `need` scratch elements, grown (but never zeroed) as
/// required; callers must overwrite before reading.
fn borrow_scratch<E: Element>(scratch: &mut Vec<E>, need: usize) -> &mut [E] {
    if scratch.len() < need {
        scratch.resize(need, E::ZERO);
    }
    &mut scratch[..need]
}

fn gemm_rowmajor<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    a_transposed: bool,
    b: &[E],
    b_transposed: bool,
    beta: E,
    c: &mut [E],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// conv2d forward. `input` is `[C_in, H, W]`, `weight` `[C_out, C_in, kh, kw]`,
/// optional `bias` `[C_out]`.
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<Tensor<E>> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "conv2d input must be rank 3, got {:?}",
            input.shape()
        )));
    };
    let &[c_out, wc_in, kh, kw] = weight.shape() else {
        return Err(Error::shape(format!(
            "conv2d weight must be rank 4, got {:?}",
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {c_in}, weight {wc_in}"
        )));
    }
    if stride == 0 || dil == 0 {
        return Err(Error::invalid("conv2d stride/dilation must be positive"));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
    }
    let ho = conv_out_extent(h, kh, stride, pad, dil)
        .ok_or_else(|| Error::shape(format!("conv2d output extent non-positive for H={h}")))?;
    let wo = conv_out_extent(w, kw, stride, pad, dil)
        .ok_or_else(|| Error::shape(format!("conv2d output extent non-positive for W={w}")))?;
    let n = ho * wo;
    let kdim = c_in * kh * kw;
    let mut out = vec![E::ZERO; c_out * n];
    if is_pointwise(kh, kw, stride, pad) {
        gemm_rowmajor(c_out, kdim, n, weight.data(), false, input.data(), false, E::ZERO, &mut out);
    } else {
        E::with_scratch(|scratch| {
            let cols = borrow_scratch(scratch, kdim * n);
            im2col(input.data(), c_in, h, w, kh, kw, stride, pad, dil, ho, wo, cols);
            gemm_rowmajor(c_out, kdim, n, weight.data(), false, cols, false, E::ZERO, &mut out);
        });
    }
    if let Some(b) = bias {
        for co in 0..c_out {
            let bv = b.data()[co];
            for v in &mut out[co * n..(co + 1) * n] {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

/// conv2d adjoint: accumulates into `dinput`, `dweight`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    dout: &Tensor<E>,
    stride: usize,
    pad: usize,
    dil: usize,
    dinput: Option<&mut [E]>,
    dweight: Option<&mut [E]>,
    dbias: Option<&mut [E]>,
) {
    let [c_in, h, w] = *input.shape() else { unreachable!() };
    let [c_out, _, kh, kw] = *weight.shape() else { unreachable!() };
    let [_, ho, wo] = *dout.shape() else { unreachable!() };
    let n = ho * wo;
    let kdim = c_in * kh * kw;
    if is_pointwise(kh, kw, stride, pad) {
        if let Some(dw) = dweight {
            // dW[c_out, kdim] += dOut[c_out, n] * in^T[n, kdim]
            gemm_rowmajor(c_out, n, kdim, dout.data(), false, input.data(), true, E::ONE, dw);
        }
        if let Some(di) = dinput {
            // dIn[kdim, n] += W^T[kdim, c_out] * dOut[c_out, n]
            gemm_rowmajor(kdim, c_out, n, weight.data(), true, dout.data(), false, E::ONE, di);
        }
    } else if dweight.is_some() || dinput.is_some() {
        E::with_scratch(|scratch| {
            let cols = borrow_scratch(scratch, kdim * n);
            if let Some(dw) = dweight {
                im2col(input.data(), c_in, h, w, kh, kw, stride, pad, dil, ho, wo, cols);
                // dW[c_out, kdim] += dOut[c_out, n] * cols^T[n, kdim]
                gemm_rowmajor(c_out, n, kdim, dout.data(), false, cols, true, E::ONE, dw);
            }
            if let Some(di) = dinput {
                // dcols[kdim, n] = W^T[kdim, c_out] * dOut[c_out, n]
                gemm_rowmajor(kdim, c_out, n, weight.data(), true, dout.data(), false, E::ZERO, cols);
                col2im(cols, c_in, h, w, kh, kw, stride, pad, dil, ho, wo, di);
            }
        });
    }
    if let Some(db) = dbias {
        for co in 0..c_out {
            let mut s = E::ZERO;
            for v in &dout.data()[co * n..(co + 1) * n] {
                s += *v;
            }
            db[co] += s;
        }
    }
}

/// Transposed convolution forward, the adjoint of [`conv2d_forward`] in the
/// spatial sense. `input` is `[C_in, H, W]`, `weight` `[C_in, C_out, kh, kw]`.
pub fn deconv2d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "deconv2d input must be rank 3, got {:?}",
            input.shape()
        )));
    };
    let &[wc_in, c_out, kh, kw] = weight.shape() else {
        return Err(Error::shape(format!(
            "deconv2d weight must be rank 4, got {:?}",
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "deconv2d channel mismatch: input {c_in}, weight {wc_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("deconv2d stride must be positive"));
    }
    let ho = deconv_out_extent(h, kh, stride, pad)
        .ok_or_else(|| Error::shape(format!("deconv2d output extent non-positive for H={h}")))?;
    let wo = deconv_out_extent(w, kw, stride, pad)
        .ok_or_else(|| Error::shape(format!("deconv2d output extent non-positive for W={w}")))?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "deconv2d bias shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
    }
    let n = h * w;
    let kdim = c_out * kh * kw;
    let mut out = vec![E::ZERO; c_out * ho * wo];
    E::with_scratch(|scratch| {
        // cols[kdim, n] = W^T[kdim, c_in] * in[c_in, n]
        let cols = borrow_scratch(scratch, kdim * n);
        gemm_rowmajor(kdim, c_in, n, weight.data(), true, input.data(), false, E::ZERO, cols);
        // Scatter with the conv geometry of the *output* image.
        col2im(cols, c_out, ho, wo, kh, kw, stride, pad, 1, h, w, &mut out);
    });
    if let Some(b) = bias {
        let plane = ho * wo;
        for co in 0..c_out {
            let bv = b.data()[co];
            for v in &mut out[co * plane..(co + 1) * plane] {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    dout: &Tensor<E>,
    stride: usize,
    pad: usize,
    dinput: Option<&mut [E]>,
    dweight: Option<&mut [E]>,
    dbias: Option<&mut [E]>,
) {
    let [c_in, h, w] = *input.shape() else { unreachable!() };
    let [_, c_out, kh, kw] = *weight.shape() else { unreachable!() };
    let [_, ho, wo] = *dout.shape() else { unreachable!() };
    let n = h * w;
    let kdim = c_out * kh * kw;
    if dinput.is_some() || dweight.is_some() {
        E::with_scratch(|scratch| {
            // cols[kdim, n] = im2col(dOut) with the forward scatter geometry.
            let cols = borrow_scratch(scratch, kdim * n);
            im2col(dout.data(), c_out, ho, wo, kh, kw, stride, pad, 1, h, w, cols);
            if let Some(di) = dinput {
                // dIn[c_in, n] += Wmat[c_in, kdim] * cols[kdim, n]
                gemm_rowmajor(c_in, kdim, n, weight.data(), false, cols, false, E::ONE, di);
            }
            if let Some(dw) = dweight {
                // dW[c_in, kdim] += in[c_in, n] * cols^T[n, kdim]
                gemm_rowmajor(c_in, n, kdim, input.data(), false, cols, true, E::ONE, dw);
            }
        });
    }
    if let Some(db) = dbias {
        let plane = ho * wo;
        for co in 0..c_out {
            let mut s = E::ZERO;
            for v in &dout.data()[co * plane..(co + 1) * plane] {
                s += *v;
            }
            db[co] += s;
        }
    }
}

/// 4-D correlation: `out[i,j,m,n] = Σ_c xs[c,i,j] * xt[c,m,n]`.
pub fn correlate_forward<E: Element>(xs: &Tensor<E>, xt: &Tensor<E>) -> Result<Tensor<E>> {
    let &[c, hs, ws] = xs.shape() else {
        return Err(Error::shape("correlate expects rank-3 feature maps"));
    };
    let &[ct, ht, wt] = xt.shape() else {
        return Err(Error::shape("correlate expects rank-3 feature maps"));
    };
    if c != ct {
        return Err(Error::shape(format!(
            "correlate channel mismatch: {c} vs {ct}"
        )));
    }
    let ns = hs * ws;
    let nt = ht * wt;
    let mut out = vec![E::ZERO; ns * nt];
    // out[ns, nt] = xs^T[ns, c] * xt[c, nt]
    gemm_rowmajor(ns, c, nt, xs.data(), true, xt.data(), false, E::ZERO, &mut out);
    Tensor::new(vec![hs, ws, ht, wt], out)
}

pub fn correlate_backward<E: Element>(
    xs: &Tensor<E>,
    xt: &Tensor<E>,
    dout: &Tensor<E>,
    dxs: Option<&mut [E]>,
    dxt: Option<&mut [E]>,
) {
    let [c, hs, ws] = *xs.shape() else { unreachable!() };
    let [_, ht, wt] = *xt.shape() else { unreachable!() };
    let ns = hs * ws;
    let nt = ht * wt;
    if let Some(dxs) = dxs {
        // dxs[c, ns] += xt[c, nt] * dOut^T[nt, ns]
        gemm_rowmajor(c, nt, ns, xt.data(), false, dout.data(), true, E::ONE, dxs);
    }
    if let Some(dxt) = dxt {
        // dxt[c, nt] += xs[c, ns] * dOut[ns, nt]
        gemm_rowmajor(c, ns, nt, xs.data(), false, dout.data(), false, E::ONE, dxt);
    }
}

/// Catmull-Rom (a = -0.5) weights for fractional offset `t` from the second
/// of four consecutive samples.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    [
        ((-0.5 * t + 1.0) * t - 0.5) * t,
        (1.5 * t - 2.5) * t * t + 1.0,
        ((-1.5 * t + 2.0) * t + 0.5) * t,
        (0.5 * t - 0.5) * t * t,
    ]
}

/// Tap table for doubling an axis of extent `n` with half-pixel aligned
/// bicubic interpolation. Stencil indices are edge-clamped.
pub fn bicubic_double_taps<E: Element>(n: usize) -> Vec<[(usize, E); 4]> {
    let mut taps = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor();
        let t = src - base;
        let w = catmull_rom_weights(t);
        let mut entry = [(0usize, E::ZERO); 4];
        for (k, we) in w.iter().enumerate() {
            let idx = (base as isize + k as isize - 1).clamp(0, n as isize - 1) as usize;
            entry[k] = (idx, E::from_f64(*we));
        }
        taps.push(entry);
    }
    taps
}

/// Doubles axis `axis` of a row-major tensor via the bicubic tap table.
pub fn upscale_axis_forward<E: Element>(input: &Tensor<E>, axis: usize) -> Tensor<E> {
    let shape = input.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = bicubic_double_taps::<E>(n);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 2 * n;
    let mut out = vec![E::ZERO; outer * 2 * n * inner];
    let src = input.data();
    for ou in 0..outer {
        let in_base = ou * n * inner;
        let out_base = ou * 2 * n * inner;
        for (o, tap) in taps.iter().enumerate() {
            let dst = &mut out[out_base + o * inner..out_base + (o + 1) * inner];
            // Pivot form: out = x_p + sum_k w_k (x_k - x_p). Because the tap
            // weights sum exactly to one, constant inputs pass through
            // bit-for-bit even when w_k * c would round.
            let (pidx, _) = tap[1];
            let pivot = &src[in_base + pidx * inner..in_base + (pidx + 1) * inner];
            dst.copy_from_slice(pivot);
            for (k, &(idx, w)) in tap.iter().enumerate() {
                if k == 1 {
                    continue;
                }
                let s = &src[in_base + idx * inner..in_base + (idx + 1) * inner];
                for ((d, v), p) in dst.iter_mut().zip(s).zip(pivot) {
                    *d += w * (*v - *p);
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("upscale shape consistent")
}

/// Adjoint of [`upscale_axis_forward`]: accumulates into `dinput`.
pub fn upscale_axis_adjoint<E: Element>(dout: &Tensor<E>, axis: usize, dinput: &mut [E]) {
    let shape = dout.shape();
    let n2 = shape[axis];
    let n = n2 / 2;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = bicubic_double_taps::<E>(n);
    let g = dout.data();
    for ou in 0..outer {
        let in_base = ou * n * inner;
        let out_base = ou * n2 * inner;
        for (o, tap) in taps.iter().enumerate() {
            let src = &g[out_base + o * inner..out_base + (o + 1) * inner];
            for &(idx, w) in tap {
                let d = &mut dinput[in_base + idx * inner..in_base + (idx + 1) * inner];
                for (dv, sv) in d.iter_mut().zip(src) {
                    *dv += w * *sv;
                }
            }
        }
    }
}

/// Collects the r x r neighborhood of every cell: `[C,H,W] -> [C,H*W,r*r]`,
/// zero-padded at the borders.
pub fn gather_neighborhood_forward<E: Element>(input: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if r % 2 == 0 {
        return Err(Error::invalid(format!("neighborhood r must be odd, got {r}")));
    }
    let &[c, h, w] = input.shape() else {
        return Err(Error::shape("gather_neighborhood expects [C,H,W]"));
    };
    let half = (r / 2) as isize;
    let mut out = vec![E::ZERO; c * h * w * r * r];
    let src = input.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let base = (((ch * h + i) * w) + j) * r * r;
                for a in 0..r {
                    let y = i as isize + a as isize - half;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for b in 0..r {
                        let x = j as isize + b as isize - half;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        out[base + a * r + b] = plane[y as usize * w + x as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h * w, r * r], out)
}

pub fn gather_neighborhood_adjoint<E: Element>(
    dout: &Tensor<E>,
    r: usize,
    h: usize,
    w: usize,
    dinput: &mut [E],
) {
    let c = dout.shape()[0];
    let half = (r / 2) as isize;
    let g = dout.data();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let base = (((ch * h + i) * w) + j) * r * r;
                for a in 0..r {
                    let y = i as isize + a as isize - half;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for b in 0..r {
                        let x = j as isize + b as isize - half;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        dinput[(ch * h + y as usize) * w + x as usize] += g[base + a * r + b];
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over contiguous groups of length `group`.
/// `data.len()` must be a multiple of `group`.
pub fn softmax_groups<E: Element>(data: &[E], group: usize, out: &mut [E]) {
    debug_assert_eq!(data.len() % group, 0);
    for (chunk, dst) in data.chunks_exact(group).zip(out.chunks_exact_mut(group)) {
        let mut mx = chunk[0];
        for &v in &chunk[1..] {
            mx = mx.maximum(v);
        }
        let mut sum = E::ZERO;
        for (d, &v) in dst.iter_mut().zip(chunk) {
            let e = (v - mx).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

/// Softmax backward over contiguous groups: `dx = y * (dy - Σ y*dy)`.
pub fn softmax_groups_backward<E: Element>(y: &[E], dy: &[E], group: usize, dx: &mut [E]) {
    for ((yc, dyc), dxc) in y
        .chunks_exact(group)
        .zip(dy.chunks_exact(group))
        .zip(dx.chunks_exact_mut(group))
    {
        let mut dot = E::ZERO;
        for (yv, dyv) in yc.iter().zip(dyc) {
            dot += *yv * *dyv;
        }
        for ((dxv, yv), dyv) in dxc.iter_mut().zip(yc).zip(dyc) {
            *dxv += *yv * (*dyv - dot);
        }
    }
}
