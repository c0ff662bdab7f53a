//! Image quality metrics.
//!
//! SSIM follows the standard single-scale formulation: 11x11 Gaussian
//! window (sigma 1.5), population statistics, C1 = (k1 L)^2, C2 = (k2 L)^2,
//! averaged over all fully-valid window positions. Computation is in f64
//! regardless of the input element type. Frozen cross-library fixtures in
//! the test suite pin the exact convention.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let n = a.shape().count();
    if n == 0 {
        return Err(Error::arg("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to64() - y.to64();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB. Identical inputs give +infinity.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 || !max_val.is_finite() {
        return Err(Error::arg(format!("psnr max_val must be positive, got {max_val}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 1.0,
        }
    }
}

/// Mean SSIM over all (sample, channel) planes and valid window positions.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let s = a.shape();
    let win = params.window;
    if win == 0 || win.is_multiple_of(2) {
        return Err(Error::arg(format!("ssim window must be odd, got {win}")));
    }
    if s.h < win || s.w < win {
        return Err(Error::shape(
            "ssim",
            format!("at least {win}x{win}"),
            format!("{}x{}", s.h, s.w),
        ));
    }

    let kernel = gaussian_kernel_2d(win, params.sigma);
    let c1 = (params.k1 * params.max_val).powi(2);
    let c2 = (params.k2 * params.max_val).powi(2);

    let mut total = 0.0f64;
    let mut positions = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let pa = a.plane(n, c);
            let pb = b.plane(n, c);
            for y0 in 0..=s.h - win {
                for x0 in 0..=s.w - win {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut sxx = 0.0;
                    let mut syy = 0.0;
                    let mut sxy = 0.0;
                    for ky in 0..win {
                        let row = (y0 + ky) * s.w + x0;
                        let ka = &pa[row..row + win];
                        let kb = &pb[row..row + win];
                        let kw = &kernel[ky * win..(ky + 1) * win];
                        for kx in 0..win {
                            let wv = kw[kx];
                            let xv = ka[kx].to64();
                            let yv = kb[kx].to64();
                            mx += wv * xv;
                            my += wv * yv;
                            sxx += wv * xv * xv;
                            syy += wv * yv * yv;
                            sxy += wv * xv * yv;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += val;
                    positions += 1;
                }
            }
        }
    }
    Ok(total / positions as f64)
}

fn gaussian_kernel_2d(win: usize, sigma: f64) -> Vec<f64> {
    let r = (win / 2) as isize;
    let mut k1 = Vec::with_capacity(win);
    for i in -r..=r {
        k1.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = k1.iter().sum();
    for v in &mut k1 {
        *v /= norm;
    }
    let mut k2 = Vec::with_capacity(win * win);
    for y in 0..win {
        for x in 0..win {
            k2.push(k1[y] * k1[x]);
        }
    }
    k2
}
