//! Tape-free forward versions of the differentiable ops.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

fn unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, crate::Var) -> Result<crate::Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

fn with_weights<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, crate::Var, crate::Var, crate::Var) -> Result<crate::Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = f(&mut g, xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    with_weights(x, w, b, |g, x, w, b| g.conv2d(x, w, b))
}

pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    with_weights(x, w, b, |g, x, w, b| g.conv3d(x, w, b, padding))
}

pub fn deconv2<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    with_weights(x, w, b, |g, x, w, b| g.deconv2(x, w, b))
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, x| g.avg_pool2(x))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, x| g.relu(x))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, x| g.sigmoid(x))
}

/// Softmax across the two entries of the leading axis.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, x| g.softmax2(x, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_preserves_spatial_shape() {
        let x = Tensor::<f64>::full(&[1, 8, 8], 0.3);
        let w = Tensor::full(&[1, 1, 3, 3], 0.1);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
    }

    #[test]
    fn conv2d_ones_interior_is_nine() {
        let x = Tensor::<f64>::full(&[1, 6, 6], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data()[2 * 6 + 3], 9.0);
        // corners see four taps, edges six
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[3], 6.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 5, 7], |i| (i as f64).sin());
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv3d_shapes() {
        let x = Tensor::<f32>::full(&[18, 8, 8, 8], 0.1);
        let w = Tensor::full(&[36, 18, 3, 3, 3], 0.01);
        let y = conv3d(&x, &w, &Tensor::zeros(&[36]), 1).unwrap();
        assert_eq!(y.shape(), &[36, 8, 8, 8]);

        let x = Tensor::<f32>::full(&[32, 2, 4, 4], 0.1);
        let w = Tensor::full(&[1, 32, 2, 1, 1], 0.01);
        let y = conv3d(&x, &w, &Tensor::zeros(&[1]), 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv3d_unsupported_kernel_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let err = conv3d(&x, &w, &Tensor::zeros(&[1]), 0).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn pooling() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[3, 4, 6], 1.75);
        assert_eq!(avg_pool2(&c).unwrap(), Tensor::full(&[3, 2, 3], 1.75));
        let big = Tensor::<f32>::zeros(&[32, 48, 64]);
        assert_eq!(avg_pool2(&big).unwrap().shape(), &[32, 24, 32]);
        assert!(avg_pool2(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn deconv_single_tap() {
        let x = t(&[1, 1, 1], &[2.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, -1.0, 0.5, 3.0]);
        let y = deconv2(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0, -2.0, 1.0, 6.0]);
    }

    #[test]
    fn deconv_doubles() {
        let x = Tensor::<f32>::zeros(&[32, 24, 32]);
        let w = Tensor::zeros(&[32, 32, 2, 2]);
        let y = deconv2(&x, &w, &Tensor::zeros(&[32])).unwrap();
        assert_eq!(y.shape(), &[32, 48, 64]);
    }

    #[test]
    fn elementwise() {
        let x = t(&[3], &[-1.0, 0.0, 2.5]);
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.5]);
        let s = sigmoid(&t(&[2], &[0.0, -800.0])).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data()[1] < 1e-6 && s.data()[1] >= 0.0);
    }

    #[test]
    fn softmax_pairs() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0 + 3f64.ln()]);
        let y = softmax_channels(&x).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.25).abs() < 1e-12);
        assert!((y.data()[3] - 0.75).abs() < 1e-12);
        assert!(softmax_channels(&Tensor::<f64>::zeros(&[3, 2])).is_err());
    }
}
