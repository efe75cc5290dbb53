//! Finite-difference checks of every differentiable op, ten seeds each.

mod common;

use common::grad;

#[test]
fn conv2d_gradients() {
    grad::conv2d().iter().for_each(grad::Check::assert);
}

#[test]
fn conv3d_gradients() {
    grad::conv3d().iter().for_each(grad::Check::assert);
}

#[test]
fn deconv2_gradients() {
    grad::deconv2().iter().for_each(grad::Check::assert);
}

#[test]
fn pool_and_pointwise_gradients() {
    grad::pool_and_pointwise().iter().for_each(grad::Check::assert);
}

#[test]
fn sigmoid_gradient_tight() {
    grad::sigmoid_tight().assert();
}
