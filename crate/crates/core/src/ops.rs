//! Convolution, activation, and residual-add kernels with explicit backward
//! passes. The fast convolution path lowers to im2col plus GEMM in bounded
//! row chunks; [`reference`] keeps straight nested-loop implementations of
//! the same contracts for cross-checking.
//!
//! All convolutions have stride one. Padding is symmetric zero padding.
//! Every kernel is single-threaded and accumulates in a fixed order, so
//! outputs are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Elements per im2col scratch buffer (~4 MiB for f32).
const IM2COL_BUDGET_ELEMS: usize = 1 << 20;

/// Weights and bias for a standard convolution. Weight layout is
/// (out_ch, in_ch, k, k); flattened rows are GEMM-ready.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    weights: Tensor<T>,
    bias: Vec<T>,
    pad: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, pad: usize) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return Err(Error::arg(format!("kernel must be square, got {}x{}", s.h, s.w)));
        }
        if s.h.is_multiple_of(2) || s.h == 0 {
            return Err(Error::arg(format!("kernel size must be odd, got {}", s.h)));
        }
        if bias.len() != s.n {
            return Err(Error::shape("conv bias", s.n, bias.len()));
        }
        Ok(ConvParams { weights, bias, pad })
    }

    pub fn out_ch(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_ch(&self) -> usize {
        self.weights.shape().c
    }

    pub fn k(&self) -> usize {
        self.weights.shape().h
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Simultaneous mutable views of weight and bias storage.
    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.weights.data_mut(), &mut self.bias)
    }
}

/// Depthwise convolution: one k x k filter per channel, layout (c, 1, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConvParams<T> {
    weights: Tensor<T>,
    bias: Vec<T>,
    pad: usize,
}

impl<T: Element> DepthwiseConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, pad: usize) -> Result<Self> {
        let s = weights.shape();
        if s.c != 1 {
            return Err(Error::shape("depthwise weights", "(c, 1, k, k)", s));
        }
        if s.h != s.w || s.h.is_multiple_of(2) || s.h == 0 {
            return Err(Error::arg(format!("kernel must be square and odd, got {}x{}", s.h, s.w)));
        }
        if bias.len() != s.n {
            return Err(Error::shape("depthwise bias", s.n, bias.len()));
        }
        Ok(DepthwiseConvParams { weights, bias, pad })
    }

    pub fn channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn k(&self) -> usize {
        self.weights.shape().h
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Simultaneous mutable views of weight and bias storage.
    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.weights.data_mut(), &mut self.bias)
    }
}

pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
}

pub struct DepthwiseConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
}

fn conv_output_hw(h: usize, w: usize, k: usize, pad: usize, context: &str) -> Result<(usize, usize)> {
    let eff_h = h + 2 * pad;
    let eff_w = w + 2 * pad;
    if eff_h < k || eff_w < k {
        return Err(Error::shape(
            context,
            format!("padded input at least {k}x{k}"),
            format!("{eff_h}x{eff_w} (input {h}x{w}, pad {pad})"),
        ));
    }
    Ok((eff_h - k + 1, eff_w - k + 1))
}

pub fn conv2d_forward<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward_chunked(input, p, IM2COL_BUDGET_ELEMS)
}

/// Forward convolution with an explicit im2col budget (elements). Exposed so
/// tests can force the chunked path; results are identical for any budget.
pub fn conv2d_forward_chunked<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    budget_elems: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c != p.in_ch() {
        return Err(Error::shape("conv input channels", p.in_ch(), s.c));
    }
    let k = p.k();
    let pad = p.pad();
    let (out_h, out_w) = conv_output_hw(s.h, s.w, k, pad, "conv forward")?;
    let out_ch = p.out_ch();
    let kcols = s.c * k * k;
    let out_hw = out_h * out_w;

    let rows_per_chunk = chunk_rows(budget_elems, kcols, out_w, out_h);
    let mut cols = vec![T::zero(); kcols * rows_per_chunk * out_w];
    let mut out = Tensor::zeros(Shape::new(s.n, out_ch, out_h, out_w));

    let w_flat = p.weights().data();
    for sample in 0..s.n {
        let sample_base = sample * out_ch * out_hw;
        let mut cy = 0;
        while cy < out_h {
            let rows = rows_per_chunk.min(out_h - cy);
            let p_cols = rows * out_w;
            im2col_chunk(input, sample, k, pad, cy, rows, out_w, &mut cols[..kcols * p_cols]);
            T::gemm(
                out_ch,
                kcols,
                p_cols,
                T::one(),
                w_flat,
                kcols as isize,
                1,
                &cols[..kcols * p_cols],
                p_cols as isize,
                1,
                T::zero(),
                &mut out.data_mut()[sample_base + cy * out_w..],
                out_hw as isize,
                1,
            );
            cy += rows;
        }
    }
    add_bias(&mut out, p.bias());
    Ok(out)
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_chunked(input, p, grad_out, IM2COL_BUDGET_ELEMS)
}

/// Backward pass with an explicit im2col budget. Unlike the forward path,
/// weight and input gradients accumulate across chunks, so their low bits
/// depend on the budget; the budget is a fixed constant in production,
/// which keeps results bitwise reproducible run to run.
pub fn conv2d_backward_chunked<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    budget_elems: usize,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    if s.c != p.in_ch() {
        return Err(Error::shape("conv input channels", p.in_ch(), s.c));
    }
    let k = p.k();
    let pad = p.pad();
    let (out_h, out_w) = conv_output_hw(s.h, s.w, k, pad, "conv backward")?;
    let expected = Shape::new(s.n, p.out_ch(), out_h, out_w);
    if grad_out.shape() != expected {
        return Err(Error::shape("conv grad_out", expected, grad_out.shape()));
    }

    let out_ch = p.out_ch();
    let kcols = s.c * k * k;
    let out_hw = out_h * out_w;
    let (ph, pw) = (s.h + 2 * pad, s.w + 2 * pad);

    let mut grad_bias = vec![T::zero(); out_ch];
    for sample in 0..s.n {
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &g in grad_out.plane(sample, oc) {
                acc += g;
            }
            *gb += acc;
        }
    }

    let rows_per_chunk = chunk_rows(budget_elems, kcols, out_w, out_h);
    let mut cols = vec![T::zero(); kcols * rows_per_chunk * out_w];
    let mut gcols = vec![T::zero(); kcols * rows_per_chunk * out_w];
    let mut padded = vec![T::zero(); s.c * ph * pw];

    let mut grad_weights = Tensor::zeros(p.weights().shape());
    let mut grad_input = Tensor::zeros(s);
    let w_flat = p.weights().data();

    for sample in 0..s.n {
        let sample_base = sample * out_ch * out_hw;
        padded.fill(T::zero());
        let mut cy = 0;
        while cy < out_h {
            let rows = rows_per_chunk.min(out_h - cy);
            let p_cols = rows * out_w;
            let a_gout = &grad_out.data()[sample_base + cy * out_w..];

            // grad_W += G_chunk (out_ch x P) * cols^T (P x kcols)
            im2col_chunk(input, sample, k, pad, cy, rows, out_w, &mut cols[..kcols * p_cols]);
            T::gemm(
                out_ch,
                p_cols,
                kcols,
                T::one(),
                a_gout,
                out_hw as isize,
                1,
                &cols[..kcols * p_cols],
                1,
                p_cols as isize,
                T::one(),
                grad_weights.data_mut(),
                kcols as isize,
                1,
            );

            // gcols (kcols x P) = W^T (kcols x out_ch) * G_chunk (out_ch x P)
            T::gemm(
                kcols,
                out_ch,
                p_cols,
                T::one(),
                w_flat,
                1,
                kcols as isize,
                a_gout,
                out_hw as isize,
                1,
                T::zero(),
                &mut gcols[..kcols * p_cols],
                p_cols as isize,
                1,
            );
            col2im_chunk(&gcols[..kcols * p_cols], s.c, k, cy, rows, out_w, pw, &mut padded);
            cy += rows;
        }
        // Crop padding back off the scattered gradient.
        for c in 0..s.c {
            for y in 0..s.h {
                let src = c * ph * pw + (y + pad) * pw + pad;
                let dst = grad_input.offset(sample, c, y, 0);
                grad_input.data_mut()[dst..dst + s.w].copy_from_slice(&padded[src..src + s.w]);
            }
        }
    }

    Ok(ConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

fn chunk_rows(budget_elems: usize, kcols: usize, out_w: usize, out_h: usize) -> usize {
    (budget_elems / (kcols * out_w).max(1)).clamp(1, out_h.max(1))
}

/// Fill `cols` (kcols x rows*out_w row-major) with the receptive-field
/// columns for output rows [cy, cy+rows). Out-of-image taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col_chunk<T: Element>(
    input: &Tensor<T>,
    sample: usize,
    k: usize,
    pad: usize,
    cy: usize,
    rows: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let s = input.shape();
    let p_cols = rows * out_w;
    for ic in 0..s.c {
        let plane = input.plane(sample, ic);
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ic * k + ky) * k + kx) * p_cols;
                for oy in cy..cy + rows {
                    let dst_base = row_base + (oy - cy) * out_w;
                    let dst = &mut cols[dst_base..dst_base + out_w];
                    let y = (oy + ky) as isize - pad as isize;
                    if y < 0 || y >= s.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    // x = ox + kx - pad for ox in [0, out_w)
                    let x0 = kx as isize - pad as isize;
                    let lo = ((-x0).max(0) as usize).min(out_w);
                    let hi = (s.w as isize - x0).clamp(0, out_w as isize) as usize;
                    dst[..lo].fill(T::zero());
                    if hi > lo {
                        let src = y as usize * s.w + (x0 + lo as isize) as usize;
                        dst[lo..hi].copy_from_slice(&plane[src..src + (hi - lo)]);
                    }
                    dst[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

/// Inverse of [`im2col_chunk`]: scatter-add column gradients into a padded
/// image buffer (c x ph x pw). Accumulation order is fixed.
#[allow(clippy::too_many_arguments)]
fn col2im_chunk<T: Element>(
    gcols: &[T],
    in_ch: usize,
    k: usize,
    cy: usize,
    rows: usize,
    out_w: usize,
    pw: usize,
    padded: &mut [T],
) {
    let p_cols = rows * out_w;
    let plane_len = padded.len() / in_ch;
    for ic in 0..in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ic * k + ky) * k + kx) * p_cols;
                for oy in cy..cy + rows {
                    let src = &gcols[row_base + (oy - cy) * out_w..row_base + (oy - cy + 1) * out_w];
                    let dst_base = ic * plane_len + (oy + ky) * pw + kx;
                    let dst = &mut padded[dst_base..dst_base + out_w];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut Tensor<T>, bias: &[T]) {
    let s = out.shape();
    for sample in 0..s.n {
        for (oc, &b) in bias.iter().enumerate() {
            if b != T::zero() {
                for v in out.plane_mut(sample, oc) {
                    *v += b;
                }
            }
        }
    }
}

pub fn depthwise_conv2d_forward<T: Element>(
    input: &Tensor<T>,
    p: &DepthwiseConvParams<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c != p.channels() {
        return Err(Error::shape("depthwise input channels", p.channels(), s.c));
    }
    let k = p.k();
    let pad = p.pad();
    let (out_h, out_w) = conv_output_hw(s.h, s.w, k, pad, "depthwise forward")?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));

    for sample in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(sample, c);
            let filter = p.weights().plane(c, 0);
            let out_plane = out.plane_mut(sample, c);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = filter[ky * k + kx];
                    let x0 = kx as isize - pad as isize;
                    for oy in 0..out_h {
                        let y = (oy + ky) as isize - pad as isize;
                        if y < 0 || y >= s.h as isize {
                            continue;
                        }
                        let lo = (-x0).max(0) as usize;
                        let hi = (s.w as isize - x0).clamp(0, out_w as isize) as usize;
                        if hi <= lo {
                            continue;
                        }
                        let src = &plane[y as usize * s.w + (x0 + lo as isize) as usize..];
                        let dst = &mut out_plane[oy * out_w + lo..oy * out_w + hi];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
            let b = p.bias()[c];
            if b != T::zero() {
                for v in out_plane {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &DepthwiseConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DepthwiseConvGrads<T>> {
    let s = input.shape();
    if s.c != p.channels() {
        return Err(Error::shape("depthwise input channels", p.channels(), s.c));
    }
    let k = p.k();
    let pad = p.pad();
    let (out_h, out_w) = conv_output_hw(s.h, s.w, k, pad, "depthwise backward")?;
    let expected = Shape::new(s.n, s.c, out_h, out_w);
    if grad_out.shape() != expected {
        return Err(Error::shape("depthwise grad_out", expected, grad_out.shape()));
    }

    let (ph, pw) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut grad_weights = Tensor::zeros(p.weights().shape());
    let mut grad_bias = vec![T::zero(); s.c];
    let mut grad_input = Tensor::zeros(s);
    let mut padded = vec![T::zero(); ph * pw];

    for sample in 0..s.n {
        for (c, gb) in grad_bias.iter_mut().enumerate() {
            let plane = input.plane(sample, c);
            let gout = grad_out.plane(sample, c);
            let filter = p.weights().plane(c, 0);

            let mut bias_acc = T::zero();
            for &g in gout {
                bias_acc += g;
            }
            *gb += bias_acc;

            padded.fill(T::zero());
            for ky in 0..k {
                for kx in 0..k {
                    let x0 = kx as isize - pad as isize;
                    let mut w_acc = T::zero();
                    for oy in 0..out_h {
                        let y = (oy + ky) as isize - pad as isize;
                        // grad wrt input flows through every tap, including
                        // taps that land in the zero-padding ring.
                        let g_row = &gout[oy * out_w..(oy + 1) * out_w];
                        let pdst = &mut padded[(oy + ky) * pw + kx..(oy + ky) * pw + kx + out_w];
                        let wv = filter[ky * k + kx];
                        for (d, &g) in pdst.iter_mut().zip(g_row) {
                            *d += wv * g;
                        }
                        if y < 0 || y >= s.h as isize {
                            continue;
                        }
                        let lo = (-x0).max(0) as usize;
                        let hi = (s.w as isize - x0).clamp(0, out_w as isize) as usize;
                        if hi <= lo {
                            continue;
                        }
                        let src = &plane[y as usize * s.w + (x0 + lo as isize) as usize..];
                        for (i, &g) in g_row[lo..hi].iter().enumerate() {
                            w_acc += g * src[i];
                        }
                    }
                    let widx = grad_weights.offset(c, 0, ky, kx);
                    grad_weights.data_mut()[widx] += w_acc;
                }
            }
            for y in 0..s.h {
                let src = (y + pad) * pw + pad;
                let dst = grad_input.offset(sample, c, y, 0);
                grad_input.data_mut()[dst..dst + s.w].copy_from_slice(&padded[src..src + s.w]);
            }
        }
    }

    Ok(DepthwiseConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Straight nested-loop implementations used as oracles for the GEMM-backed
/// kernels. Kept deliberately naive; do not optimize.
pub mod reference {
    use super::*;

    pub fn conv2d_forward_ref<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.c != p.in_ch() {
            return Err(Error::shape("conv input channels", p.in_ch(), s.c));
        }
        let k = p.k();
        let pad = p.pad() as isize;
        let (out_h, out_w) = conv_output_hw(s.h, s.w, k, p.pad(), "conv forward (reference)")?;
        let mut out = Tensor::zeros(Shape::new(s.n, p.out_ch(), out_h, out_w));
        for n in 0..s.n {
            for oc in 0..p.out_ch() {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = p.bias()[oc];
                        for ic in 0..s.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = oy as isize + ky as isize - pad;
                                    let x = ox as isize + kx as isize - pad;
                                    if y < 0 || y >= s.h as isize || x < 0 || x >= s.w as isize {
                                        continue;
                                    }
                                    acc += p.weights().at(oc, ic, ky, kx)
                                        * input.at(n, ic, y as usize, x as usize);
                                }
                            }
                        }
                        out.set(n, oc, oy, ox, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn depthwise_conv2d_forward_ref<T: Element>(
        input: &Tensor<T>,
        p: &DepthwiseConvParams<T>,
    ) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.c != p.channels() {
            return Err(Error::shape("depthwise input channels", p.channels(), s.c));
        }
        let k = p.k();
        let pad = p.pad() as isize;
        let (out_h, out_w) = conv_output_hw(s.h, s.w, k, p.pad(), "depthwise forward (reference)")?;
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = p.bias()[c];
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = oy as isize + ky as isize - pad;
                                let x = ox as isize + kx as isize - pad;
                                if y < 0 || y >= s.h as isize || x < 0 || x >= s.w as isize {
                                    continue;
                                }
                                acc += p.weights().at(c, 0, ky, kx) * input.at(n, c, y as usize, x as usize);
                            }
                        }
                        out.set(n, c, oy, ox, acc);
                    }
                }
            }
        }
        Ok(out)
    }
}
