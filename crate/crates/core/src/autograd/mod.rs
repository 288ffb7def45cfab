//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Only the primitives the search space needs are provided: grouped and dilated
//! convolution, pooling, parameter-free batch normalization, a few elementwise
//! operations, channel concatenation, a linear head and cross-entropy.

mod conv;
mod pool;
mod tape;
mod tensor;

pub use conv::Conv2dConfig;
pub use pool::{PoolConfig, PoolKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Float, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn tensor_rejects_mismatched_length() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::Shape(_))
        ));
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn conv_of_ones_sums_nine_at_center() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, Conv2dConfig::new(1, 1, 1, 1)).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| i as f32 * 0.25 - 3.0).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 2, 5, 4], data.clone()));
        let k = tape.constant(t(&[2, 1, 3, 3], [kernel.clone(), kernel].concat()));
        let y = tape.conv2d(x, k, Conv2dConfig::new(1, 1, 1, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_bad_groups_and_windows() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(tape.conv2d(x, k, Conv2dConfig::new(1, 0, 1, 2)).is_err());
        let big = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
        assert!(matches!(
            tape.conv2d(x, big, Conv2dConfig::default()),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn avg_pool_of_constant_is_constant_inside() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 2.5));
        let y = tape.pool2d(x, PoolConfig::new(PoolKind::Avg, 3, 1, 1)).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[5], 2.5);
        assert_eq!(out[10], 2.5);
        // corner window sees four real values out of nine
        assert!((out[0] - 2.5 * 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn max_pool_on_increasing_row_takes_last_element() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 1, 6], vec![0., 1., 2., 3., 4., 5.]));
        let y = tape.pool2d(x, PoolConfig::new(PoolKind::Max, 3, 1, 1)).unwrap();
        assert!(tape.pool2d(x, PoolConfig::new(PoolKind::Max, 3, 1, 3)).is_err());
        // each window's last real element, the final window being clipped by padding
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5., 5.]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first_index() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1., 1., 1., 1.]), true);
        let y = tape.pool2d(x, PoolConfig::new(PoolKind::Max, 2, 1, 0)).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn batch_norm_of_standardized_channel_is_identity() {
        let data = vec![-1.0f32, 1.0, -1.0, 1.0];
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], data.clone()));
        let y = tape.batch_norm(x, 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_of_constant_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2, 2], 7.0));
        let y = tape.batch_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let single = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(tape.batch_norm(single, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[3, 10], 0.7));
        let l = tape.cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_saturated_correct_class_goes_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 3], vec![0.0, 200.0, 0.0]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(TensorError::Input(_))));
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Usage(_))));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn unused_parameter_gets_exact_zero_and_frozen_leaf_gets_nothing() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::scalar(5.0), true);
        let frozen = tape.leaf(Tensor::scalar(4.0), false);
        let y = tape.mul(x, frozen).unwrap();
        let zero = tape.scale(unused, 0.0).unwrap();
        let z = tape.add(y, zero).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(unused).unwrap().item(), Some(0.0));
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(x).unwrap().item(), Some(4.0));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn subsample_takes_ceil_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()));
        let y = tape.subsample(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[0., 2., 6., 8.]);
    }
}
