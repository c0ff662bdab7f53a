//! Synthetic degradation models on [0,1] intensity images.
//!
//! Three models are supported:
//!   gaussian           y = x + n,              n ~ N(0, (sigma/255)^2)
//!   poisson            y = k / peak,           k ~ Poisson(x * peak)
//!   poisson-gaussian   y = (k + g) / peak,     k as above, g ~ N(0, sigma^2)
//!
//! `sigma` for the Gaussian model is quoted on the 8-bit (0..255) scale;
//! for the mixed model it is quoted on the peak-scaled photon count, with
//! unit gain. Degraded values are NOT clipped; clipping happens only when
//! an image is quantized for 8-bit file output.
//!
//! The Poisson sampler is written out in full: sequential-search inversion
//! for small rates and the PTRS transformed-rejection sampler for large
//! ones, so draws are identical on every platform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Rate threshold between the inversion and PTRS samplers.
const PTRS_THRESHOLD: f64 = 10.0;

/// Evaluation grids used across the benchmark commands.
pub const GAUSSIAN_SIGMA_GRID: [f64; 4] = [10.0, 25.0, 50.0, 75.0];
pub const POISSON_PEAK_GRID: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const PG_SIGMA_GRID: [f64; 8] = [0.1, 0.2, 0.5, 1.0, 2.0, 3.0, 6.0, 12.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    Poisson { peak: f64 },
    PoissonGaussian { sigma: f64, peak: f64 },
}

impl NoiseModel {
    /// Mixed-model grid convention: the read-noise level fixes the peak.
    pub fn poisson_gaussian_at(sigma: f64) -> Self {
        NoiseModel::PoissonGaussian {
            sigma,
            peak: 10.0 * sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            NoiseModel::Poisson { peak } if peak > 0.0 && peak.is_finite() => Ok(()),
            NoiseModel::PoissonGaussian { sigma, peak }
                if sigma >= 0.0 && sigma.is_finite() && peak > 0.0 && peak.is_finite() =>
            {
                Ok(())
            }
            _ => Err(Error::arg(format!("invalid noise parameters: {self:?}"))),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            NoiseModel::Gaussian { sigma } => format!("gaussian:{}", trim(sigma)),
            NoiseModel::Poisson { peak } => format!("poisson:{}", trim(peak)),
            NoiseModel::PoissonGaussian { sigma, peak } => {
                format!("poisson-gaussian:{}:{}", trim(sigma), trim(peak))
            }
        }
    }

    /// Parse a CLI spec: "gaussian:SIGMA", "poisson:PEAK",
    /// "poisson-gaussian:SIGMA[:PEAK]" (peak defaults to 10*sigma).
    pub fn parse_spec(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::arg(format!("bad number '{v}' in noise spec '{s}'")))
        };
        let model = match parts.as_slice() {
            ["gaussian", sigma] => NoiseModel::Gaussian { sigma: num(sigma)? },
            ["poisson", peak] => NoiseModel::Poisson { peak: num(peak)? },
            ["poisson-gaussian", sigma] | ["pg", sigma] => {
                NoiseModel::poisson_gaussian_at(num(sigma)?)
            }
            ["poisson-gaussian", sigma, peak] | ["pg", sigma, peak] => {
                NoiseModel::PoissonGaussian {
                    sigma: num(sigma)?,
                    peak: num(peak)?,
                }
            }
            _ => {
                return Err(Error::arg(format!(
                    "bad noise spec '{s}' (expected gaussian:S | poisson:P | poisson-gaussian:S[:P])"
                )))
            }
        };
        model.validate()?;
        Ok(model)
    }

    /// Theoretical first two moments of the degraded value at clean level x.
    pub fn moments(&self, x: f64) -> (f64, f64) {
        match *self {
            NoiseModel::Gaussian { sigma } => {
                let s = sigma / 255.0;
                (x, s * s)
            }
            NoiseModel::Poisson { peak } => (x, x / peak),
            NoiseModel::PoissonGaussian { sigma, peak } => {
                (x, (x * peak + sigma * sigma) / (peak * peak))
            }
        }
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v}");
    s
}

/// Apply a degradation model pixelwise. The clean image must lie in [0,1];
/// the result is not clipped.
pub fn degrade<T: Element>(
    clean: &Tensor<T>,
    model: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    model.validate()?;
    for &v in clean.data() {
        let x = v.to64();
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::arg(format!(
                "clean intensity {x} outside [0,1]; rescale before degrading"
            )));
        }
    }
    let mut out = Vec::with_capacity(clean.data().len());
    match *model {
        NoiseModel::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::arg(e.to_string()))?;
            for &v in clean.data() {
                out.push(T::of(v.to64() + normal.sample(rng)));
            }
        }
        NoiseModel::Poisson { peak } => {
            for &v in clean.data() {
                let k = sample_poisson(v.to64() * peak, rng);
                out.push(T::of(k as f64 / peak));
            }
        }
        NoiseModel::PoissonGaussian { sigma, peak } => {
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::arg(e.to_string()))?;
            for &v in clean.data() {
                let k = sample_poisson(v.to64() * peak, rng) as f64;
                let g = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                out.push(T::of((k + g) / peak));
            }
        }
    }
    Tensor::new(clean.shape(), out)
}

/// Draw one Poisson(lambda) variate. lambda = 0 returns 0 deterministically.
pub fn sample_poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    debug_assert!(lambda >= 0.0 && lambda.is_finite());
    if lambda <= 0.0 {
        0
    } else if lambda < PTRS_THRESHOLD {
        poisson_inversion(lambda, rng)
    } else {
        poisson_ptrs(lambda, rng)
    }
}

/// Knuth-style sequential search; expected lambda+1 uniforms per draw.
fn poisson_inversion(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    let limit = (-lambda).exp();
    let mut k = 0u64;
    let mut prod: f64 = rng.random();
    while prod > limit {
        k += 1;
        prod *= rng.random::<f64>();
    }
    k
}

/// Hormann's PTRS transformed-rejection sampler for lambda >= 10.
fn poisson_ptrs(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let invalpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);

    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + invalpha.ln() - (a / (us * us) + b).ln()
            <= k * loglam - lambda - ln_factorial(k as u64)
        {
            return k as u64;
        }
    }
}

/// ln(k!) via an exact table for small k and a Stirling series above it.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE: [f64; 10] = [
        1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0, 5040.0, 40320.0, 362880.0,
    ];
    if k < 10 {
        TABLE[k as usize].ln()
    } else {
        let x = (k + 1) as f64;
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        // Stirling series for ln Gamma(x); the first omitted term is
        // 1/(1188 x^9) < 4e-13 for x >= 11.
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
            + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
    }
}

pub fn poisson_pmf(k: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * lambda.ln() - lambda - ln_factorial(k)).exp()
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentCheck {
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiSquareCheck {
    pub statistic: f64,
    pub threshold: f64,
    pub dof: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseValidationReport {
    pub label: String,
    pub samples: usize,
    pub clean_level: f64,
    pub mean: MomentCheck,
    pub variance: MomentCheck,
    pub chi_square: Option<ChiSquareCheck>,
}

impl NoiseValidationReport {
    pub fn pass(&self) -> bool {
        self.mean.pass && self.variance.pass && self.chi_square.as_ref().is_none_or(|c| c.pass)
    }
}

/// Degrade a constant image at `clean_level` and compare empirical moments
/// (and, for integer-valued models with moderate rates, the full pmf)
/// against theory. Mean tolerance is four standard errors; variance
/// tolerance is 2% relative; pmf threshold is the 99.9% chi-square quantile.
pub fn validate_noise_statistics(
    model: &NoiseModel,
    samples: usize,
    clean_level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseValidationReport> {
    if samples < 1000 {
        return Err(Error::arg("need at least 1000 samples for validation"));
    }
    if !(0.0..=1.0).contains(&clean_level) {
        return Err(Error::arg("clean level must lie in [0,1]"));
    }
    let side = (samples as f64).sqrt().ceil() as usize;
    let clean = Tensor::<f64>::filled(crate::tensor::Shape::new(1, 1, side, side), clean_level);
    let noisy = degrade(&clean, model, rng)?;
    let data = &noisy.data()[..samples];

    let n = samples as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let (mu, sig2) = model.moments(clean_level);

    let mean_tol = 4.0 * (sig2 / n).sqrt();
    let var_tol = 0.02 * sig2;
    let mean_check = MomentCheck {
        expected: mu,
        observed: mean,
        tolerance: mean_tol,
        pass: (mean - mu).abs() <= mean_tol,
    };
    let var_check = MomentCheck {
        expected: sig2,
        observed: var,
        tolerance: var_tol,
        pass: (var - sig2).abs() <= var_tol,
    };

    let chi_square = match *model {
        NoiseModel::Poisson { peak } => {
            let lambda = clean_level * peak;
            if lambda <= 30.0 {
                let counts: Vec<u64> = data.iter().map(|&y| (y * peak).round() as u64).collect();
                Some(poisson_chi_square(&counts, lambda))
            } else {
                None
            }
        }
        _ => None,
    };

    Ok(NoiseValidationReport {
        label: model.label(),
        samples,
        clean_level,
        mean: mean_check,
        variance: var_check,
        chi_square,
    })
}

/// Pearson chi-square of observed Poisson counts against the exact pmf.
/// Tail bins are pooled so every expected count is at least five.
pub fn poisson_chi_square(counts: &[u64], lambda: f64) -> ChiSquareCheck {
    let n = counts.len() as f64;
    let mut observed: Vec<f64> = Vec::new();
    let mut expected: Vec<f64> = Vec::new();

    // Walk k upward until the remaining tail mass is below 5 expected hits.
    let mut tail_mass = 1.0;
    let mut k = 0u64;
    loop {
        let p = poisson_pmf(k, lambda);
        if tail_mass - p < 5.0 / n || expected.len() > 400 {
            break;
        }
        expected.push(p * n);
        observed.push(counts.iter().filter(|&&c| c == k).count() as f64);
        tail_mass -= p;
        k += 1;
    }
    // Pooled tail bin: everything >= k.
    expected.push(tail_mass * n);
    observed.push(counts.iter().filter(|&&c| c >= k).count() as f64);

    // Merge any leading bins that still fall under five expected.
    let (mut obs_m, mut exp_m) = (Vec::new(), Vec::new());
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            obs_m.push(o_acc);
            exp_m.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        if let (Some(lo), Some(le)) = (obs_m.last_mut(), exp_m.last_mut()) {
            *lo += o_acc;
            *le += e_acc;
        }
    }

    let statistic: f64 = obs_m
        .iter()
        .zip(&exp_m)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = exp_m.len().saturating_sub(1).max(1);
    let threshold = chi2_quantile_999(dof);
    ChiSquareCheck {
        statistic,
        threshold,
        dof,
        pass: statistic < threshold,
    }
}

/// Wilson-Hilferty approximation of the 0.999 chi-square quantile.
fn chi2_quantile_999(dof: usize) -> f64 {
    let d = dof as f64;
    let z = 3.090_232_306_167_814; // Phi^-1(0.999)
    let t = 1.0 - 2.0 / (9.0 * d) + z * (2.0 / (9.0 * d)).sqrt();
    d * t * t * t
}
