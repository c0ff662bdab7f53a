//! Training losses. The edge-aware loss augments plain MSE with a penalty
//! concentrated on edge pixels:
//!
//!   L = mean((t - p)^2) + w * mean((M .* (t - p))^2)
//!
//! where the edge map M is computed from the clean target only and is held
//! constant in backpropagation. Two map variants are supported: a clipped
//! Sobel magnitude (default weight 0.025) and a thresholded binary mask
//! (default weight 4, threshold 150 on the 8-bit magnitude scale).
//!
//! Gradient wrt the prediction: dL/dp = (2/N) * (p - t) * (1 + w * M^2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMapMode {
    SobelMagnitude,
    BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAwareSpec {
    pub mode: EdgeMapMode,
    pub weight: f64,
    /// Magnitude threshold on the 0..255 scale; used by the binary mask.
    pub threshold: f64,
}

impl EdgeAwareSpec {
    pub fn sobel_magnitude() -> Self {
        EdgeAwareSpec {
            mode: EdgeMapMode::SobelMagnitude,
            weight: 0.025,
            threshold: 150.0,
        }
    }

    pub fn binary_mask() -> Self {
        EdgeAwareSpec {
            mode: EdgeMapMode::BinaryMask,
            weight: 4.0,
            threshold: 150.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum LossSpec {
    Mse,
    EdgeAware(EdgeAwareSpec),
}

impl LossSpec {
    /// CLI names: "mse", "edge-sobel", "edge-binary".
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossSpec::Mse),
            "edge-sobel" => Ok(LossSpec::EdgeAware(EdgeAwareSpec::sobel_magnitude())),
            "edge-binary" => Ok(LossSpec::EdgeAware(EdgeAwareSpec::binary_mask())),
            other => Err(Error::arg(format!(
                "unknown loss '{other}' (expected mse|edge-sobel|edge-binary)"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LossSpec::Mse => "mse".into(),
            LossSpec::EdgeAware(spec) => match spec.mode {
                EdgeMapMode::SobelMagnitude => format!("edge-sobel(w={})", spec.weight),
                EdgeMapMode::BinaryMask => {
                    format!("edge-binary(w={},thr={})", spec.weight, spec.threshold)
                }
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse_term: f64,
    pub edge_term: f64,
}

fn check_pair<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(what, target.shape(), pred.shape()));
    }
    if pred.shape().count() == 0 {
        return Err(Error::arg(format!("{what}: empty tensors")));
    }
    Ok(())
}

/// Mean squared error and its gradient with respect to the prediction.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(LossValue, Tensor<T>)> {
    check_pair(pred, target, "mse loss")?;
    let n = pred.shape().count() as f64;
    let scale = T::of(2.0 / n);
    let mut sum = 0.0f64;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.to64() * d.to64();
            scale * d
        })
        .collect();
    let mse = sum / n;
    if !mse.is_finite() {
        return Err(Error::NonFinite("mse loss".into()));
    }
    Ok((
        LossValue {
            total: mse,
            mse_term: mse,
            edge_term: 0.0,
        },
        Tensor::new(pred.shape(), grad)?,
    ))
}

/// Edge map of a single-channel batch. Sobel gradients use replicate
/// padding at the borders; magnitude is sqrt(Gx^2 + Gy^2) on [0,1] data.
pub fn edge_map<T: Element>(target: &Tensor<T>, spec: &EdgeAwareSpec) -> Result<Tensor<T>> {
    let s = target.shape();
    if s.c != 1 {
        return Err(Error::shape("edge map", "single channel", s));
    }
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape("edge map", "at least 2x2", s));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let plane = target.plane(n, 0);
        let get = |y: isize, x: isize| -> f64 {
            let yy = y.clamp(0, s.h as isize - 1) as usize;
            let xx = x.clamp(0, s.w as isize - 1) as usize;
            plane[yy * s.w + xx].to64()
        };
        let dst = out.plane_mut(n, 0);
        for y in 0..s.h as isize {
            for x in 0..s.w as isize {
                // Paired differences so flat regions cancel exactly in
                // floating point (a constant image has an all-zero map).
                let gx = (get(y - 1, x + 1) - get(y - 1, x - 1))
                    + 2.0 * (get(y, x + 1) - get(y, x - 1))
                    + (get(y + 1, x + 1) - get(y + 1, x - 1));
                let gy = (get(y + 1, x - 1) - get(y - 1, x - 1))
                    + 2.0 * (get(y + 1, x) - get(y - 1, x))
                    + (get(y + 1, x + 1) - get(y - 1, x + 1));
                let mag = (gx * gx + gy * gy).sqrt();
                let m = match spec.mode {
                    EdgeMapMode::SobelMagnitude => mag.min(1.0),
                    EdgeMapMode::BinaryMask => {
                        if mag * 255.0 >= spec.threshold {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                dst[y as usize * s.w + x as usize] = T::of(m);
            }
        }
    }
    Ok(out)
}

/// Edge-aware loss and gradient. The map is derived from `target` alone,
/// so it contributes no gradient terms of its own.
pub fn edge_aware_loss<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    spec: &EdgeAwareSpec,
) -> Result<(LossValue, Tensor<T>)> {
    check_pair(pred, target, "edge-aware loss")?;
    let map = edge_map(target, spec)?;
    let n = pred.shape().count() as f64;
    let scale = T::of(2.0 / n);
    let w = T::of(spec.weight);
    let mut mse_sum = 0.0f64;
    let mut edge_sum = 0.0f64;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(map.data())
        .map(|((&p, &t), &m)| {
            let d = p - t;
            let d64 = d.to64();
            let m64 = m.to64();
            mse_sum += d64 * d64;
            edge_sum += m64 * m64 * d64 * d64;
            scale * d * (T::one() + w * m * m)
        })
        .collect();
    let mse_term = mse_sum / n;
    let edge_term = edge_sum / n;
    let total = mse_term + spec.weight * edge_term;
    if !total.is_finite() {
        return Err(Error::NonFinite("edge-aware loss".into()));
    }
    Ok((
        LossValue {
            total,
            mse_term,
            edge_term,
        },
        Tensor::new(pred.shape(), grad)?,
    ))
}

pub fn evaluate_loss<T: Element>(
    spec: &LossSpec,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(LossValue, Tensor<T>)> {
    match spec {
        LossSpec::Mse => mse_loss(pred, target),
        LossSpec::EdgeAware(e) => edge_aware_loss(pred, target, e),
    }
}
