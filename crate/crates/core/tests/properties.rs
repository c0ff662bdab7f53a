//! Property suites: the fast convolution path against the nested-loop
//! reference, adjoint identities, noise and patch invariants, checkpoint
//! round trips, and count arithmetic, across randomized shapes and seeds.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnres_forge::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointMeta};
use dnres_forge::data::{epoch_batches, extract_patch_pairs};
use dnres_forge::loss::{evaluate_loss, EdgeAwareSpec, EdgeMapMode, LossSpec};
use dnres_forge::network::Network;
use dnres_forge::noise::{degrade, NoiseModel};
use dnres_forge::ops::reference::{conv2d_forward_ref, depthwise_conv2d_forward_ref};
use dnres_forge::ops::{
    conv2d_backward, conv2d_forward, depthwise_conv2d_forward, ConvParams, DepthwiseConvParams,
};
use dnres_forge::rng::{stream_rng, StreamRole};
use dnres_forge::tensor::{Shape, Tensor};
use dnres_forge::topology::Topology;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn rand_tensor32(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= tol * scale
}

/// (in_ch, out_ch, k, pad, h, w) with a valid output window.
fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (1usize..=5, 1usize..=6, prop_oneof![Just(1usize), Just(3), Just(5)], 0usize..=2)
        .prop_flat_map(|(ic, oc, k, pad)| {
            let min_side = k.saturating_sub(2 * pad).max(1);
            (
                Just(ic),
                Just(oc),
                Just(k),
                Just(pad),
                min_side..=12usize,
                min_side..=12usize,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_conv_matches_nested_loop_reference(
        (ic, oc, k, pad, h, w) in conv_case(),
        n in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let input = rand_tensor(Shape::new(n, ic, h, w), seed);
        let weights = rand_tensor(Shape::new(oc, ic, k, k), seed ^ 1);
        let bias: Vec<f64> = rand_tensor(Shape::new(1, 1, 1, oc), seed ^ 2).data().to_vec();
        let p = ConvParams::new(weights, bias, pad).unwrap();
        let fast = conv2d_forward(&input, &p).unwrap();
        let slow = conv2d_forward_ref(&input, &p).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        for (i, (&a, &b)) in fast.data().iter().zip(slow.data()).enumerate() {
            prop_assert!(close(a, b, 1e-12), "elem {i}: {a} vs {b}");
        }
    }

    #[test]
    fn depthwise_conv_matches_nested_loop_reference(
        c in 1usize..=6,
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
        pad in 0usize..=2,
        seed in any::<u64>(),
    ) {
        let side = k.saturating_sub(2 * pad).max(1) + 7;
        let input = rand_tensor(Shape::new(1, c, side, side), seed);
        let weights = rand_tensor(Shape::new(c, 1, k, k), seed ^ 1);
        let bias: Vec<f64> = rand_tensor(Shape::new(1, 1, 1, c), seed ^ 2).data().to_vec();
        let p = DepthwiseConvParams::new(weights, bias, pad).unwrap();
        let fast = depthwise_conv2d_forward(&input, &p).unwrap();
        let slow = depthwise_conv2d_forward_ref(&input, &p).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        for (&a, &b) in fast.data().iter().zip(slow.data()) {
            prop_assert!(close(a, b, 1e-12), "{a} vs {b}");
        }
    }

    /// With zero bias the convolution is linear, so <conv(x), y> must equal
    /// <x, grad_input(y)> and <w, grad_weights(y)>. This checks the backward
    /// pass against the forward pass with no finite differences involved.
    #[test]
    fn conv_backward_satisfies_the_adjoint_identity(
        (ic, oc, k, pad, h, w) in conv_case(),
        seed in any::<u64>(),
    ) {
        let input = rand_tensor(Shape::new(1, ic, h, w), seed);
        let weights = rand_tensor(Shape::new(oc, ic, k, k), seed ^ 1);
        let p = ConvParams::new(weights.clone(), vec![0.0; oc], pad).unwrap();
        let out = conv2d_forward(&input, &p).unwrap();
        let cotangent = rand_tensor(out.shape(), seed ^ 2);
        let grads = conv2d_backward(&input, &p, &cotangent).unwrap();

        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
        };
        let lhs = dot(&out, &cotangent);
        prop_assert!(close(lhs, dot(&input, &grads.grad_input), 1e-10), "input adjoint");
        prop_assert!(close(lhs, dot(&weights, &grads.grad_weights), 1e-10), "weight adjoint");
        // grad_bias is the per-channel sum of the cotangent.
        for (ch, &gb) in grads.grad_bias.iter().enumerate() {
            let sum: f64 = cotangent.plane(0, ch).iter().sum();
            prop_assert!(close(gb, sum, 1e-12), "bias adjoint ch {ch}");
        }
    }

    #[test]
    fn degradation_is_a_pure_function_of_the_stream(
        sigma in 0.5f64..80.0,
        seed in any::<u64>(),
        index in 0u64..1000,
    ) {
        let clean = rand_tensor32(Shape::new(1, 1, 17, 19), seed);
        let model = NoiseModel::Gaussian { sigma };
        let a = degrade(&clean, &model, &mut stream_rng(seed, StreamRole::Noise, index)).unwrap();
        let b = degrade(&clean, &model, &mut stream_rng(seed, StreamRole::Noise, index)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.shape(), clean.shape());
        prop_assert!(a.data() != clean.data(), "noise at sigma {sigma} must perturb");
    }

    #[test]
    fn noise_labels_round_trip_through_parse(
        sigma in prop_oneof![Just(10.0f64), Just(25.0), Just(50.0), Just(75.0), 0.01f64..100.0],
        peak in prop_oneof![Just(1.0f64), Just(2.0), Just(4.0), Just(8.0), 0.1f64..400.0],
    ) {
        for model in [
            NoiseModel::Gaussian { sigma },
            NoiseModel::Poisson { peak },
            NoiseModel::PoissonGaussian { sigma, peak },
        ] {
            let parsed = NoiseModel::parse_spec(&model.label()).unwrap();
            prop_assert_eq!(parsed, model);
        }
    }

    #[test]
    fn sigma_zero_gaussian_is_the_identity(seed in any::<u64>()) {
        let clean = rand_tensor32(Shape::new(1, 1, 9, 9), seed);
        let model = NoiseModel::Gaussian { sigma: 0.0 };
        let out = degrade(&clean, &model, &mut stream_rng(seed, StreamRole::Noise, 0)).unwrap();
        prop_assert_eq!(out.data(), clean.data());
    }

    #[test]
    fn patch_grid_covers_the_image_with_aligned_crops(
        h in 33usize..=70,
        w in 33usize..=70,
        stride in 1usize..=32,
        seed in any::<u64>(),
    ) {
        let clean = rand_tensor32(Shape::new(1, 1, h, w), seed);
        let noisy = rand_tensor32(Shape::new(1, 1, h, w), seed ^ 1);
        let pairs = extract_patch_pairs(&clean, &noisy, "img", 3, stride, None).unwrap();

        let positions = |span: usize| if span == 0 { 1 } else { span.div_ceil(stride) + 1 };
        prop_assert_eq!(pairs.len(), positions(h - 33) * positions(w - 33));

        for pair in &pairs {
            prop_assert_eq!(pair.noisy.shape(), Shape::new(1, 1, 33, 33));
            prop_assert_eq!(pair.clean.shape(), Shape::new(1, 1, 17, 17));
            prop_assert_eq!(pair.model_index, 3);
            let (y, x) = pair.origin;
            prop_assert!(y + 33 <= h && x + 33 <= w);
            // The noisy window is a verbatim crop, the clean target sits
            // 8 pixels inside it.
            for py in 0..33 {
                for px in 0..33 {
                    prop_assert_eq!(pair.noisy.at(0, 0, py, px), noisy.at(0, 0, y + py, x + px));
                }
            }
            for py in 0..17 {
                for px in 0..17 {
                    prop_assert_eq!(
                        pair.clean.at(0, 0, py, px),
                        clean.at(0, 0, y + 8 + py, x + 8 + px)
                    );
                }
            }
        }
    }

    #[test]
    fn epoch_batches_partition_the_pairs(
        count in 1usize..=70,
        batch_size in 1usize..=32,
        seed in any::<u64>(),
    ) {
        let clean = rand_tensor32(Shape::new(1, 1, 33, 33), seed);
        let noisy = rand_tensor32(Shape::new(1, 1, 33, 33), seed ^ 1);
        let one = extract_patch_pairs(&clean, &noisy, "img", 0, 33, None).unwrap();
        let pairs: Vec<_> = (0..count).map(|_| one[0].clone()).collect();

        let mut rng = stream_rng(seed, StreamRole::Shuffle, 0);
        let mut seen = vec![false; count];
        for batch in epoch_batches(&pairs, batch_size, &mut rng).unwrap() {
            prop_assert!(batch.indices.len() <= batch_size);
            prop_assert_eq!(batch.noisy.shape().n, batch.indices.len());
            for &i in &batch.indices {
                prop_assert!(!seen[i], "index {i} visited twice");
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&v| v), "every pair visited once");
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        blocks in 0usize..=3,
        ds in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let ds = ds.min(blocks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f32>::build_base(&mut rng);
        for _ in 0..blocks {
            net = net.insert_resblock(&mut rng).unwrap();
        }
        for i in 0..ds {
            net = net.evolve_block(i, &mut rng).unwrap();
        }
        // Overwrite with arbitrary values so the test is not biased toward
        // the near-zero init distribution.
        for slice in net.param_slices_mut() {
            for v in slice {
                *v = rng.random_range(-3.0f32..3.0);
            }
        }
        let meta = CheckpointMeta {
            seed: Some(seed),
            optimizer: None,
            loss: None,
            stages: Vec::new(),
        };
        let bytes = encode_checkpoint(&net, &meta).unwrap();
        let (restored, meta2) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(meta2.seed, Some(seed));
        prop_assert_eq!(restored.topology().id(), net.topology().id());
        let a = net.param_slices();
        let b = restored.param_slices();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert_eq!(x, y);
        }
        prop_assert_eq!(encode_checkpoint(&restored, &meta2).unwrap(), bytes);
    }

    #[test]
    fn inserting_a_zeroed_block_is_the_identity(
        blocks in 0usize..=2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f32>::build_base(&mut rng);
        for _ in 0..blocks {
            net = net.insert_resblock(&mut rng).unwrap();
        }
        let before = net.forward(&rand_tensor32(Shape::new(1, 1, 33, 33), seed)).unwrap();

        let mut grown = net.insert_resblock(&mut rng).unwrap();
        let new_block = format!("rb{}.", blocks + 1);
        let names = grown.param_names();
        for (i, slice) in grown.param_slices_mut().into_iter().enumerate() {
            if names[i].starts_with(&new_block) {
                slice.fill(0.0);
            }
        }
        let after = grown.forward(&rand_tensor32(Shape::new(1, 1, 33, 33), seed)).unwrap();
        prop_assert_eq!(before.data(), after.data());
    }

    #[test]
    fn param_count_arithmetic_scales_with_blocks(
        blocks in 0usize..=6,
        ds in 0usize..=6,
    ) {
        let ds = ds.min(blocks);
        let mut t = Topology::with_blocks(blocks);
        for i in 0..ds {
            t = t.evolve_block(i).unwrap();
        }
        let std = blocks - ds;
        let expected = 57_184 + 18_432 * std as u64 + 1_312 * ds as u64;
        prop_assert_eq!(t.count_params(dnres_forge::topology::CountMode::WeightsOnly), expected);

        // Per-layer rows must sum to the totals.
        let rows = t.layer_report(480, 640);
        let weight_sum: u64 = rows.iter().map(|r| r.weights).sum();
        let mac_sum: u64 = rows.iter().map(|r| r.macs).sum();
        prop_assert_eq!(weight_sum, expected);
        prop_assert_eq!(mac_sum, t.count_macs(480, 640));
    }

    #[test]
    fn edge_loss_with_zero_weight_is_exactly_mse(seed in any::<u64>()) {
        let pred = rand_tensor(Shape::new(1, 1, 9, 9), seed);
        let target = rand_tensor(Shape::new(1, 1, 9, 9), seed ^ 1);
        let zero_w = LossSpec::EdgeAware(EdgeAwareSpec {
            mode: EdgeMapMode::SobelMagnitude,
            weight: 0.0,
            threshold: 150.0,
        });
        let (lv_edge, grad_edge) = evaluate_loss(&zero_w, &pred, &target).unwrap();
        let (lv_mse, grad_mse) = evaluate_loss(&LossSpec::Mse, &pred, &target).unwrap();
        prop_assert_eq!(lv_edge.total, lv_mse.total);
        prop_assert_eq!(grad_edge.data(), grad_mse.data());
    }
}
