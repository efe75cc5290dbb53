#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg::Tensor;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest elementwise relative error, with the denominator floored at 1e-3 of the
/// largest gradient magnitude so near-zero entries are compared on the gradient's scale.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Indices to probe: all of them when small, otherwise a seeded sample.
pub fn probe_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Finite differences at selected coordinates only.
pub fn numeric_grad_at(
    x: &Tensor<f64>,
    idx: &[usize],
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    idx.iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences with an explicit step.
pub fn numeric_grad_step(x0: f64, step: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

pub fn random_binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

/// Every `m`-subset of `0..n`, as index lists.
pub fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, m, &mut Vec::new(), &mut out);
    out
}

/// Two-sided rank-sum p by listing every assignment of ranks 1..=n to the first sample.
pub fn brute_force_rank_sum_p(w: f64, n: usize, m: usize) -> f64 {
    let sums: Vec<f64> = subsets(n, m).iter().map(|s| s.iter().map(|&i| (i + 1) as f64).sum()).collect();
    let total = sums.len() as f64;
    let lower = sums.iter().filter(|&&s| s <= w).count() as f64 / total;
    let upper = sums.iter().filter(|&&s| s >= w).count() as f64 / total;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Checks the exact test against brute force for every split of every pooled size up to
/// `max_n`, trying every observed rank assignment. Returns the largest disagreement.
pub fn wilcoxon_oracle_max_error(max_n: usize) -> f64 {
    let mut worst = 0.0f64;
    for n in 2..=max_n {
        for m in 1..n {
            for chosen in subsets(n, m) {
                let a: Vec<f64> = chosen.iter().map(|&i| i as f64).collect();
                let b: Vec<f64> = (0..n).filter(|i| !chosen.contains(i)).map(|i| i as f64).collect();
                let got = strokeseg::metrics::wilcoxon_exact(&a, &b).unwrap();
                let w: f64 = chosen.iter().map(|&i| (i + 1) as f64).sum();
                assert_eq!(got.w, w);
                worst = worst.max((got.p_two_sided - brute_force_rank_sum_p(w, n, m)).abs());
            }
        }
    }
    worst
}

/// Largest gap between exact and normal p over `trials` random untied 10-vs-10 samples.
pub fn wilcoxon_normal_max_gap(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..10).map(|_| r.gen::<f64>()).collect();
        let b: Vec<f64> = (0..10).map(|_| r.gen::<f64>() + 0.3 * (seed % 4) as f64 / 3.0).collect();
        let exact = strokeseg::metrics::wilcoxon_exact(&a, &b).unwrap();
        let normal = strokeseg::metrics::wilcoxon_normal(&a, &b).unwrap();
        worst = worst.max((exact.p_two_sided - normal.p_two_sided).abs());
    }
    worst
}
