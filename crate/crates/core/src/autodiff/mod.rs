//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Provides exactly the layer set the segmentation models need, a tape-based
//! [`Graph`] whose backward pass visits each op once in reverse execution
//! order, and a finite-difference oracle for validating backward rules.

mod check;
mod graph;
mod ops;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Graph, NodeId};
pub use ops::{BCE_CLAMP, DICE_EPSILON};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        // 1x1 kernel with identity weights and zero bias.
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_all_ones_3x3_counts_neighbours() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 3, 3, 1], 1.0));
        let k = g.constant(Tensor::filled(vec![3, 3, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        let out = g.value(y).data();
        // Centre sees all 9 inputs, corners see 4.
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2, 3]));
        let k = g.constant(Tensor::zeros(vec![3, 3, 2, 4]));
        let b = g.constant(Tensor::zeros(vec![4]));
        assert!(g.conv2d(x, k, b).is_err());
    }

    #[test]
    fn maxpool2_takes_window_max_and_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let odd = g.constant(Tensor::zeros(vec![1, 3, 2, 1]));
        assert!(g.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool2_constant_input_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 4, 4, 2], 0.75));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn maxpool2_tie_routes_gradient_to_first_element() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![1, 2, 2, 1], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_transpose_unit_input_reproduces_kernel_slice() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let k = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d_transpose(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 1]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_transpose_doubles_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(vec![1, 50, 25, 2], &mut rng));
        let k = g.constant(random_tensor(vec![2, 2, 2, 3], &mut rng));
        let b = g.constant(Tensor::zeros(vec![3]));
        let mut cur = g.conv2d_transpose(x, k, b).unwrap();
        assert_eq!(g.value(cur).shape(), &[1, 100, 50, 3]);
        // A chain of four doublings climbs 50x25 back to 800x400.
        let k2 = g.constant(random_tensor(vec![2, 2, 3, 3], &mut rng));
        let b2 = g.constant(Tensor::zeros(vec![3]));
        for _ in 0..3 {
            cur = g.conv2d_transpose(cur, k2, b2).unwrap();
        }
        assert_eq!(g.value(cur).shape(), &[1, 800, 400, 3]);
    }

    #[test]
    fn dense_channelwise_identity_and_channel_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w_id = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b2 = g.constant(Tensor::zeros(vec![2]));
        let y = g.dense_channelwise(x, w_id, b2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let w_sum = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b1 = g.constant(Tensor::zeros(vec![1]));
        let y = g.dense_channelwise(x, w_sum, b1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn relu_and_sigmoid_point_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![-1e4, -800.0, 800.0, 1e4]).unwrap());
        let s = g.sigmoid(x);
        for &v in g.value(s).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {v} escaped (0,1)");
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let x = Tensor::scalar(0.0);
        let mut g = Graph::new();
        let id = g.variable(x.clone());
        let s = g.sigmoid(id);
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert!((g.grad(id).unwrap()[0] - 0.25).abs() < 1e-12);
        let err = finite_diff_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn dropout_rate_zero_and_inference_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, 0.9, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_mean_at_large_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![n], 1.0));
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "dropout mean {mean}");
    }

    #[test]
    fn concat_channels_stacks_and_splits_gradients() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.variable(Tensor::new(vec![1, 1, 2, 1], vec![9.0, 8.0]).unwrap());
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        // Weighted sum so the two slices receive distinct gradients.
        let w = g.constant(Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap());
        let b0 = g.constant(Tensor::zeros(vec![1]));
        let proj = g.dense_channelwise(y, w, b0).unwrap();
        let s = g.sum(proj);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 10.0, 1.0, 10.0]);
        assert_eq!(g.grad(b).unwrap(), &[100.0, 100.0]);
    }

    #[test]
    fn concat_channels_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 2, 1]));
        let b = g.constant(Tensor::zeros(vec![1, 2, 3, 1]));
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn bce_loss_at_half_is_ln2_for_any_target() {
        for target_val in [0.0, 1.0] {
            let mut g = Graph::new();
            let p = g.constant(Tensor::filled(vec![1, 2, 2, 1], 0.5));
            let t = Tensor::filled(vec![1, 2, 2, 1], target_val);
            let valid = vec![true; 4];
            let loss = g.bce_loss(p, &t, &valid).unwrap();
            assert_eq!(g.value(loss).item(), std::f64::consts::LN_2);
        }
    }

    #[test]
    fn bce_loss_near_zero_for_perfect_prediction() {
        let mut g = Graph::new();
        let data = vec![1.0 - 1e-7, 1e-7, 1e-7, 1.0 - 1e-7];
        let p = g.constant(Tensor::new(vec![4], data).unwrap());
        let t = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = g.bce_loss(p, &t, &[true; 4]).unwrap();
        let bound = 2e-7 * (1e-7f64).ln().abs();
        assert!(g.value(loss).item() <= bound);
    }

    #[test]
    fn bce_loss_matches_hand_summed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p_data: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
        let t_data: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2))).collect();
        let valid: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();

        let mut expected = 0.0;
        let mut count = 0.0;
        for i in 0..16 {
            if valid[i] {
                expected -= t_data[i] * p_data[i].ln() + (1.0 - t_data[i]) * (1.0 - p_data[i]).ln();
                count += 1.0;
            }
        }
        expected /= count;

        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![4, 4], p_data).unwrap());
        let t = Tensor::new(vec![4, 4], t_data).unwrap();
        let loss = g.bce_loss(p, &t, &valid).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn losses_reject_empty_valid_mask() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::filled(vec![4], 0.5));
        let t = Tensor::zeros(vec![4]);
        assert!(g.bce_loss(p, &t, &[false; 4]).is_err());
        assert!(g.dice_loss(p, &t, &[false; 4]).is_err());
    }

    #[test]
    fn dice_loss_is_zero_on_exact_binary_match() {
        let mut g = Graph::new();
        let data = vec![1.0, 0.0, 1.0, 0.0];
        let p = g.constant(Tensor::new(vec![4], data.clone()).unwrap());
        let t = Tensor::new(vec![4], data).unwrap();
        let loss = g.dice_loss(p, &t, &[true; 4]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn dice_loss_worst_case_value() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::filled(vec![100], 1.0));
        let t = Tensor::zeros(vec![100]);
        let loss = g.dice_loss(p, &t, &[true; 100]).unwrap();
        assert!((g.value(loss).item() - (1.0 - 1.0 / 101.0)).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_inputs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::new();
            let x = g.variable(random_tensor(vec![1, 4, 4, 2], &mut rng));
            let k = g.variable(random_tensor(vec![3, 3, 2, 3], &mut rng));
            let b = g.variable(random_tensor(vec![3], &mut rng));
            let c = g.conv2d(x, k, b).unwrap();
            let r = g.relu(c);
            let p = g.maxpool2(r).unwrap();
            let d = g.dropout(p, 0.3, &mut rng, true).unwrap();
            let s = g.sum(d);
            g.backward(s).unwrap();
            (
                g.value(s).item().to_bits(),
                g.grad(k).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn composite_conv_relu_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(vec![1, 4, 4, 2], &mut rng);
        let kernel = random_tensor(vec![3, 3, 2, 3], &mut rng);
        let bias = random_tensor(vec![3], &mut rng);
        let err = finite_diff_check(
            |g, xid| {
                let k = g.constant(kernel.clone());
                let b = g.constant(bias.clone());
                let c = g.conv2d(xid, k, b)?;
                let r = g.relu(c);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "composite fd error {err}");
    }
}
