//! Finite-difference gradient suites shared by the gradient tests and the acceptance run.

use rand::Rng;
use strokeseg::ninepath::PostProcessor;
use strokeseg::optim::{ParamId, ParamStore};
use strokeseg::train::{graph_loss_path, graph_loss_post};
use strokeseg::unet::{Params, PathModel};
use strokeseg::{Graph, Tensor, Var};

use super::*;

pub const SEEDS: u64 = 10;
pub const ELEMENTWISE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }

    pub fn assert(&self) {
        assert!(self.passed(), "{}: max relative error {:e} (tol {:e})", self.name, self.worst, self.tol);
    }
}

type Op = fn(&mut Graph<f64>, Var, Var, Var) -> strokeseg::Result<Var>;

/// d(Σ c·op(x, w, b))/d{x,w,b} against central differences.
fn check_weighted_op(seed: u64, shapes: [&[usize]; 3], op: Op) -> f64 {
    let mut r = rng(seed);
    let tensors: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut r, s, 1.0)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let v: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, v[0], v[1], v[2]).unwrap();
        g.value(y).shape().to_vec()
    };
    let coeff = random_tensor(&mut r, &out_shape, 1.0);
    let loss = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let v: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, v[0], v[1], v[2]).unwrap();
        g.value(y).data().iter().zip(coeff.data()).map(|(a, c)| a * c).sum()
    };

    let mut g = Graph::new();
    let v: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, v[0], v[1], v[2]).unwrap();
    let c = g.constant(coeff.clone());
    let prod = g.mul(y, c).unwrap();
    let total = g.sum(prod).unwrap();
    let grads = g.backward(total).unwrap();

    let mut worst: f64 = 0.0;
    for k in 0..3 {
        // inputs the op ignores carry no gradient
        let Some(analytic) = grads.get(v[k]).map(|t| t.data().to_vec()) else {
            continue;
        };
        let idx = probe_indices(analytic.len(), 60, &mut r);
        let numeric = numeric_grad_at(&tensors[k], &idx, |probe| {
            let mut ts = tensors.clone();
            ts[k] = probe.clone();
            loss(&ts)
        });
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(max_rel_error(&picked, &numeric));
    }
    worst
}

fn op_check(name: &str, shapes: [&[usize]; 3], op: Op) -> Check {
    let worst = (0..SEEDS).map(|s| check_weighted_op(s, shapes, op)).fold(0.0, f64::max);
    Check {
        name: name.into(),
        worst,
        tol: ELEMENTWISE_TOL,
    }
}

pub fn conv2d() -> Vec<Check> {
    vec![
        op_check("conv2d", [&[2, 4, 4], &[3, 2, 3, 3], &[3]], |g, x, w, b| g.conv2d(x, w, b)),
        op_check("conv2d batched", [&[2, 2, 4, 6], &[2, 2, 3, 3], &[2]], |g, x, w, b| g.conv2d(x, w, b)),
        op_check("conv2d 1x1", [&[3, 4, 4], &[1, 3, 1, 1], &[1]], |g, x, w, b| g.conv2d(x, w, b)),
    ]
}

pub fn conv3d() -> Vec<Check> {
    vec![
        op_check("conv3d 3x3x3", [&[2, 3, 4, 3], &[2, 2, 3, 3, 3], &[2]], |g, x, w, b| g.conv3d(x, w, b, 1)),
        op_check("conv3d 2x1x1", [&[3, 2, 3, 4], &[3, 3, 2, 1, 1], &[3]], |g, x, w, b| g.conv3d(x, w, b, 0)),
    ]
}

pub fn deconv2() -> Vec<Check> {
    vec![op_check("deconv2", [&[2, 3, 2], &[2, 3, 2, 2], &[3]], |g, x, w, b| g.deconv2(x, w, b))]
}

pub fn pool_and_pointwise() -> Vec<Check> {
    vec![
        op_check("avg_pool2", [&[2, 4, 6], &[1], &[1]], |g, x, _, _| g.avg_pool2(x)),
        op_check("relu", [&[3, 5], &[1], &[1]], |g, x, _, _| g.relu(x)),
        op_check("sigmoid", [&[3, 5], &[1], &[1]], |g, x, _, _| g.sigmoid(x)),
        op_check("softmax", [&[2, 3, 4], &[1], &[1]], |g, x, _, _| g.softmax2(x, 0)),
        op_check("softmax axis1", [&[3, 2, 4], &[1], &[1]], |g, x, _, _| g.softmax2(x, 1)),
        op_check("stack+select", [&[2, 3], &[2, 3], &[1]], |g, a, b, _| {
            let s = g.stack2(a, b, 1)?;
            let m = g.affine(s, 2.0, 0.5)?;
            g.select(m, 1, 1)
        }),
        op_check("add/mul", [&[4], &[4], &[4]], |g, a, b, c| {
            let p = g.mul(a, b)?;
            g.add(p, c)
        }),
    ]
}

/// Sigmoid is smooth, so central differences agree to about h².
pub fn sigmoid_tight() -> Check {
    Check {
        tol: 1e-6,
        ..op_check("sigmoid tight", [&[20], &[1], &[1]], |g, x, _, _| g.sigmoid(x))
    }
}

pub fn all_ops() -> Vec<Check> {
    [conv2d(), conv3d(), deconv2(), pool_and_pointwise()].concat()
}

/// Gradient of `f` w.r.t. `x` by graph, against central differences at up to `probes`
/// coordinates.
fn check_input(seed: u64, x: &Tensor<f64>, probes: usize, f: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = f(&mut g, v);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().data().to_vec();
    let idx = probe_indices(x.len(), probes, &mut rng(seed ^ 0x5eed));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let l = f(&mut g, v);
        g.value(l).data()[0]
    };
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| {
            numeric_grad_step(x.data()[i], STEP, |xi| {
                let mut t = x.clone();
                t.data_mut()[i] = xi;
                eval(&t)
            })
        })
        .collect();
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    max_rel_error(&picked, &numeric)
}

/// Probe `per_param` coordinates of every parameter tensor in `store`.
fn check_params(seed: u64, store: &ParamStore<f64>, per_param: usize, loss: impl Fn(&mut Graph<f64>, &Params<'_, f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let l = loss(&mut g, &Params::trainable(store));
    let grads = g.backward(l).unwrap();
    let mut with_grads = store.clone();
    g.accumulate_param_grads(&grads, &mut with_grads);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss(&mut g, &Params::frozen(s));
        g.value(l).data()[0]
    };
    let mut r = rng(seed ^ 0xfeed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        for i in probe_indices(len, per_param, &mut r) {
            analytic.push(with_grads.get(id).gradient.data()[i]);
            numeric.push(numeric_grad_step(store.value(id).data()[i], STEP, |xi| {
                let mut s = store.clone();
                let mut t = s.value(id).clone();
                t.data_mut()[i] = xi;
                s.set_value(id, t).unwrap();
                eval(&s)
            }));
        }
    }
    assert!(analytic.len() > 100);
    max_rel_error(&analytic, &numeric)
}

fn over_seeds(name: &str, tol: f64, f: impl Fn(u64) -> f64) -> Check {
    Check {
        name: name.into(),
        worst: (0..SEEDS).map(f).fold(0.0, f64::max),
        tol,
    }
}

pub fn dice_soft() -> Check {
    over_seeds("dice_soft", ELEMENTWISE_TOL, |seed| {
        let mut r = rng(seed);
        let p = Tensor::from_fn(&[3, 5, 4], |_| r.gen_range(0.01..0.99));
        let t = random_binary(&mut r, &[3, 5, 4], 0.3);
        check_input(seed, &p, 60, |g, v| {
            let rv = g.constant(t.clone());
            g.dice_soft(v, rv).unwrap()
        })
    })
}

pub fn loss_path_head() -> Check {
    over_seeds("loss_path on 8x8 head pre-activations", ELEMENTWISE_TOL, |seed| {
        let mut r = rng(seed);
        let z = random_tensor(&mut r, &[1, 8, 8], 3.0);
        let t = random_binary(&mut r, &[1, 8, 8], 0.25);
        check_input(seed, &z, 64, |g, v| {
            let p = g.sigmoid(v).unwrap();
            let rv = g.constant(t.clone());
            graph_loss_path(g, p, rv).unwrap()
        })
    })
}

pub fn loss_post_softmax() -> Check {
    over_seeds("loss_post through softmax", ELEMENTWISE_TOL, |seed| {
        let mut r = rng(seed);
        let logits = random_tensor(&mut r, &[2, 3, 4, 3], 2.0);
        let t = random_binary(&mut r, &[3, 4, 3], 0.4);
        let tf = t.map(|v| 1.0 - v);
        check_input(seed, &logits, 72, |g, v| {
            let y = g.softmax2(v, 0).unwrap();
            let p = g.select(y, 0, 0).unwrap();
            let q = g.select(y, 0, 1).unwrap();
            let (rv, rf) = (g.constant(t.clone()), g.constant(tf.clone()));
            graph_loss_post(g, p, q, rv, rf).unwrap()
        })
    })
}

pub fn full_path_16x16() -> Check {
    over_seeds("full path on 16x16", COMPOSITE_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let model = PathModel::init(0, &mut store, &mut r).unwrap();
        // non-zero biases so every bias gradient is exercised away from the init point
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with(".b") {
                let t = random_tensor(&mut r, store.value(id).shape(), 0.1);
                store.set_value(id, t).unwrap();
            }
        }
        let a = random_tensor(&mut r, &[1, 16, 16], 1.0);
        let b = random_tensor(&mut r, &[1, 16, 16], 1.0);
        let t = random_binary(&mut r, &[1, 16, 16], 0.3);
        let params = check_params(seed, &store, 3, |g, p| {
            let (av, bv, rv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(t.clone()));
            let y = model.forward(g, p, av, bv).unwrap();
            graph_loss_path(g, y, rv).unwrap()
        });
        let frozen = Params::frozen(&store);
        let input = check_input(seed, &a, 40, |g, v| {
            let (bv, rv) = (g.constant(b.clone()), g.constant(t.clone()));
            let y = model.forward(g, &frozen, v, bv).unwrap();
            graph_loss_path(g, y, rv).unwrap()
        });
        params.max(input)
    })
}

pub fn post_processor_18x4x4x4() -> Check {
    over_seeds("post-processor on 18x4x4x4", COMPOSITE_TOL, |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let post = PostProcessor::init(&mut store, &mut r).unwrap();
        let stack = random_tensor(&mut r, &[18, 4, 4, 4], 1.0);
        let t = random_binary(&mut r, &[4, 4, 4], 0.3);
        let tf = t.map(|v| 1.0 - v);
        let loss = |g: &mut Graph<f64>, p: &Params<'_, f64>, x: Var| {
            let y = post.forward(g, p, x).unwrap();
            let lesion = g.select(y, 0, 0).unwrap();
            let complement = g.select(y, 0, 1).unwrap();
            let (rv, rf) = (g.constant(t.clone()), g.constant(tf.clone()));
            graph_loss_post(g, lesion, complement, rv, rf).unwrap()
        };
        let params = check_params(seed, &store, 20, |g, p| {
            let x = g.constant(stack.clone());
            loss(g, p, x)
        });
        let frozen = Params::frozen(&store);
        params.max(check_input(seed, &stack, 40, |g, v| loss(g, &frozen, v)))
    })
}

pub fn all_composites() -> Vec<Check> {
    vec![dice_soft(), loss_path_head(), loss_post_softmax(), full_path_16x16(), post_processor_18x4x4x4()]
}
