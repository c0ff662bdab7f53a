//! Whole-image inference and evaluation.
//!
//! The network shrinks its input spatially (no padding in the three base
//! convolutions), so full-image denoising pads each side by half the total
//! shrink first; the output then matches the input size exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SsimParams};
use crate::network::Network;
use crate::noise::{degrade, NoiseModel};
use crate::rng::{pair_index, stream_rng, StreamRole};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BorderRule {
    /// Repeat the edge pixel.
    Replicate,
    /// Mirror without repeating the edge pixel (whole-sample symmetry).
    Reflect,
}

impl fmt::Display for BorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BorderRule::Replicate => "replicate",
            BorderRule::Reflect => "reflect",
        })
    }
}

impl FromStr for BorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate" => Ok(BorderRule::Replicate),
            "reflect" => Ok(BorderRule::Reflect),
            other => Err(Error::arg(format!(
                "unknown border rule '{other}' (expected replicate|reflect)"
            ))),
        }
    }
}

fn border_index(i: isize, n: usize, rule: BorderRule) -> usize {
    let n = n as isize;
    let mut i = i;
    match rule {
        BorderRule::Replicate => i.clamp(0, n - 1) as usize,
        BorderRule::Reflect => {
            // Mirror about -0.5 and n-0.5 until inside; terminates because
            // each reflection strictly reduces |distance to range|.
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        }
    }
}

/// Pad every plane by `pad` pixels on each side under the border rule.
pub fn pad_image<T: Element>(img: &Tensor<T>, pad: usize, rule: BorderRule) -> Tensor<T> {
    let s = img.shape();
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    Tensor::from_fn(out_shape, |n, c, y, x| {
        let sy = border_index(y as isize - pad as isize, s.h, rule);
        let sx = border_index(x as isize - pad as isize, s.w, rule);
        img.at(n, c, sy, sx)
    })
}

/// Denoise a single-channel image at its native size: pad by half the
/// network's spatial shrink, run the network, return an output the same
/// height and width as the input.
pub fn denoise_image<T: Element>(
    net: &Network<T>,
    noisy: &Tensor<T>,
    rule: BorderRule,
) -> Result<Tensor<T>> {
    let s = noisy.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("denoise", "(1, 1, h, w)", s));
    }
    let shrink = net.topology().spatial_shrink();
    debug_assert_eq!(shrink % 2, 0, "symmetric odd kernels always shrink evenly");
    let pad = shrink / 2;
    if rule == BorderRule::Reflect && (s.h <= pad || s.w <= pad) {
        return Err(Error::arg(format!(
            "image {}x{} too small to reflect-pad by {pad}",
            s.h, s.w
        )));
    }
    let padded = pad_image(noisy, pad, rule);
    let out = net.forward(&padded)?;
    if out.shape().h != s.h || out.shape().w != s.w {
        return Err(Error::shape("denoise output", s, out.shape()));
    }
    Ok(out)
}

/// One evaluated (image, model) combination. Metrics are computed on raw
/// unclipped intensities with a data range of 1.0.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub image: String,
    pub model: String,
    pub psnr_noisy: f64,
    pub ssim_noisy: f64,
    pub psnr_denoised: f64,
    pub ssim_denoised: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    /// Per-model mean rows, in first-appearance model order, labelled with
    /// the image name "(mean)".
    pub fn mean_rows(&self) -> Vec<EvalRow> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.model.as_str()) {
                order.push(&r.model);
            }
        }
        order
            .iter()
            .map(|model| {
                let group: Vec<&EvalRow> =
                    self.rows.iter().filter(|r| &r.model == model).collect();
                let n = group.len() as f64;
                let mean = |f: fn(&EvalRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
                EvalRow {
                    image: "(mean)".to_string(),
                    model: model.to_string(),
                    psnr_noisy: mean(|r| r.psnr_noisy),
                    ssim_noisy: mean(|r| r.ssim_noisy),
                    psnr_denoised: mean(|r| r.psnr_denoised),
                    ssim_denoised: mean(|r| r.ssim_denoised),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("image,model,psnr_noisy,ssim_noisy,psnr_denoised,ssim_denoised\n");
        for r in self.rows.iter().chain(self.mean_rows().iter()) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.image, r.model, r.psnr_noisy, r.ssim_noisy, r.psnr_denoised, r.ssim_denoised
            ));
        }
        out
    }
}

/// Degrade each clean image under each model (validation noise streams),
/// denoise, and collect metrics. Row order is (image order) x (model order).
pub fn evaluate(
    net: &Network<f32>,
    images: &[(String, Tensor<f32>)],
    models: &[NoiseModel],
    seed: u64,
    rule: BorderRule,
) -> Result<EvalTable> {
    if images.is_empty() {
        return Err(Error::arg("no evaluation images"));
    }
    if models.is_empty() {
        return Err(Error::arg("no degradation models"));
    }
    let ssim_params = SsimParams::default();
    let mut rows = Vec::with_capacity(images.len() * models.len());
    for (i, (name, clean)) in images.iter().enumerate() {
        for (m, model) in models.iter().enumerate() {
            let mut rng = stream_rng(seed, StreamRole::Validation, pair_index(i, m));
            let noisy = degrade(clean, model, &mut rng)?;
            let denoised = denoise_image(net, &noisy, rule)?;
            rows.push(EvalRow {
                image: name.clone(),
                model: model.label(),
                psnr_noisy: psnr(&noisy, clean, 1.0)?,
                ssim_noisy: ssim(&noisy, clean, &ssim_params)?,
                psnr_denoised: psnr(&denoised, clean, 1.0)?,
                ssim_denoised: ssim(&denoised, clean, &ssim_params)?,
            });
        }
    }
    Ok(EvalTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use crate::synthetic::toy_corpus;

    #[test]
    fn border_index_replicate_clamps() {
        assert_eq!(border_index(-3, 5, BorderRule::Replicate), 0);
        assert_eq!(border_index(7, 5, BorderRule::Replicate), 4);
        assert_eq!(border_index(2, 5, BorderRule::Replicate), 2);
    }

    #[test]
    fn border_index_reflect_mirrors_without_repeating_edge() {
        // n = 5: ... 2 1 | 0 1 2 3 4 | 3 2 ...
        assert_eq!(border_index(-1, 5, BorderRule::Reflect), 1);
        assert_eq!(border_index(-2, 5, BorderRule::Reflect), 2);
        assert_eq!(border_index(5, 5, BorderRule::Reflect), 3);
        assert_eq!(border_index(6, 5, BorderRule::Reflect), 2);
    }

    #[test]
    fn pad_image_replicate_extends_edges() {
        let img = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, x| (y * 2 + x) as f64);
        let padded = pad_image(&img, 1, BorderRule::Replicate);
        assert_eq!(padded.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(padded.at(0, 0, 0, 0), 0.0); // corner repeats (0,0)
        assert_eq!(padded.at(0, 0, 3, 3), 3.0); // corner repeats (1,1)
        assert_eq!(padded.at(0, 0, 1, 1), 0.0); // interior preserved
        assert_eq!(padded.at(0, 0, 2, 2), 3.0);
    }

    #[test]
    fn denoised_output_matches_input_size() {
        let mut rng = stream_rng(1, StreamRole::WeightInit, 0);
        let mut net = Network::<f32>::build_base(&mut rng);
        net = net.insert_resblock(&mut rng).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 1, 40, 52), |_, _, y, x| {
            ((y * 52 + x) % 256) as f32 / 255.0
        });
        for rule in [BorderRule::Replicate, BorderRule::Reflect] {
            let out = denoise_image(&net, &img, rule).unwrap();
            assert_eq!(out.shape(), img.shape(), "rule {rule}");
        }
    }

    #[test]
    fn zero_weight_head_denoises_to_zero_but_sizes_hold() {
        // A freshly built network with its final conv zeroed maps anything
        // to near-bias output; the point is the geometry, not quality.
        let mut rng = stream_rng(2, StreamRole::WeightInit, 0);
        let net = Network::<f32>::build_base(&mut rng);
        let img = Tensor::filled(Shape::new(1, 1, 17, 17), 0.5f32);
        let out = denoise_image(&net, &img, BorderRule::Replicate).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.is_all_finite());
    }

    #[test]
    fn evaluate_produces_rows_and_means_in_order() {
        let mut rng = stream_rng(3, StreamRole::WeightInit, 0);
        let net = Network::<f32>::build_base(&mut rng);
        let images = toy_corpus(2, 40, 40, 3);
        let models = vec![
            NoiseModel::Gaussian { sigma: 25.0 },
            NoiseModel::Poisson { peak: 4.0 },
        ];
        let table = evaluate(&net, &images, &models, 3, BorderRule::Replicate).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.rows[0].model, "gaussian:25");
        assert_eq!(table.rows[1].model, "poisson:4");

        let means = table.mean_rows();
        assert_eq!(means.len(), 2);
        assert!(means.iter().all(|r| r.image == "(mean)"));
        let expected = (table.rows[0].psnr_noisy + table.rows[2].psnr_noisy) / 2.0;
        assert!((means[0].psnr_noisy - expected).abs() < 1e-12);

        let csv = table.to_csv();
        assert!(csv.starts_with("image,model,psnr_noisy"));
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
    }

    #[test]
    fn evaluate_is_deterministic_for_fixed_seed() {
        let mut rng = stream_rng(4, StreamRole::WeightInit, 0);
        let net = Network::<f32>::build_base(&mut rng);
        let images = toy_corpus(1, 40, 40, 4);
        let models = vec![NoiseModel::Gaussian { sigma: 10.0 }];
        let a = evaluate(&net, &images, &models, 4, BorderRule::Replicate).unwrap();
        let b = evaluate(&net, &images, &models, 4, BorderRule::Replicate).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = evaluate(&net, &images, &models, 5, BorderRule::Replicate).unwrap();
        assert_ne!(a.to_csv(), c.to_csv(), "different seed must change noise");
    }

    #[test]
    fn infinite_psnr_prints_inf_in_csv() {
        let table = EvalTable {
            rows: vec![EvalRow {
                image: "x.pgm".into(),
                model: "gaussian-sigma10".into(),
                psnr_noisy: f64::INFINITY,
                ssim_noisy: 1.0,
                psnr_denoised: 30.0,
                ssim_denoised: 0.9,
            }],
        };
        assert!(table.to_csv().contains("inf"));
    }
}
