//! Finite-difference checks of the losses, a whole path and the post-processor.

mod common;

use common::grad;
use common::*;
use strokeseg::train::graph_loss_path;
use strokeseg::unet::{Params, PathModel};
use strokeseg::optim::ParamStore;
use strokeseg::Graph;

#[test]
fn dice_soft_gradient() {
    grad::dice_soft().assert();
}

#[test]
fn loss_path_gradient_wrt_head_preactivations() {
    grad::loss_path_head().assert();
}

#[test]
fn loss_post_gradient_through_softmax() {
    grad::loss_post_softmax().assert();
}

#[test]
fn full_path_gradient_on_16x16() {
    grad::full_path_16x16().assert();
}

#[test]
fn post_processor_gradient_on_18x4x4x4() {
    grad::post_processor_18x4x4x4().assert();
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let model = PathModel::init(0, &mut store, &mut r).unwrap();
    let a = random_tensor(&mut r, &[1, 16, 16], 1.0);
    let b = random_tensor(&mut r, &[1, 16, 16], 1.0);
    let t = random_binary(&mut r, &[1, 16, 16], 0.3);
    let mut g = Graph::new();
    let (av, bv, rv) = (g.constant(a), g.constant(b), g.constant(t));
    let y = model.forward(&mut g, &Params::trainable(&store), av, bv).unwrap();
    let loss = graph_loss_path(&mut g, y, rv).unwrap();
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut store);
    for p in store.params().iter().filter(|p| p.name.contains(".enc")) {
        assert!(p.gradient.data().iter().any(|&v| v != 0.0), "{} has no gradient", p.name);
    }
}
