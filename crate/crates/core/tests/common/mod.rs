//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trend_lab::ndmath::{Activation, Mlp, MlpSpec, OutputActivation, Tensor2};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that two tiny numbers agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// A random network, input batch and upstream gradient. Layer widths and
/// depth vary with the seed.
pub fn random_case(seed: u64) -> (Mlp, Tensor2, Tensor2) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=4);
    let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
    let act = if rng.random::<bool>() { Activation::Tanh } else { Activation::Relu };
    let out = if rng.random::<bool>() { OutputActivation::Tanh } else { OutputActivation::Identity };
    let spec = MlpSpec::new(sizes.clone(), act, out).unwrap();
    let net = Mlp::new(spec, &mut rng);
    let rows = rng.random_range(1..=3);
    let x = Tensor2::from_fn(rows, sizes[0], |_, _| rng.random_range(-1.5..1.5));
    let up = Tensor2::from_fn(rows, *sizes.last().unwrap(), |_, _| rng.random_range(-1.0..1.0));
    (net, x, up)
}

fn objective(net: &Mlp, x: &Tensor2, up: &Tensor2) -> f64 {
    let y = net.forward_batch(x).unwrap();
    y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error between the analytic gradient of `up . f(x)` and
/// central differences, over every parameter and input coordinate. Relu
/// kinks closer than the step are skipped since the difference quotient is
/// meaningless there.
pub fn fd_max_rel_error(seed: u64) -> f64 {
    let (net, x, up) = random_case(seed);
    let cache = net.forward_cached(&x).unwrap();
    let mut grads = net.params().zeros_like();
    let gx = net.backward_batch(&cache, &up, Some(&mut grads), true).unwrap().unwrap();
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let (mut plus, mut minus) = (net.clone(), net.clone());
        *plus.params_mut().flat_mut(i) += FD_STEP;
        *minus.params_mut().flat_mut(i) -= FD_STEP;
        if kink_crossed(&net, &plus, &minus, &x) {
            continue;
        }
        let fd = (objective(&plus, &x, &up) - objective(&minus, &x, &up)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    for i in 0..x.data().len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += FD_STEP;
        xm.data_mut()[i] -= FD_STEP;
        if kink_crossed_input(&net, &xp, &xm) {
            continue;
        }
        let fd = (objective(&net, &xp, &up) - objective(&net, &xm, &up)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    worst
}

// Pre-activation sign patterns of every hidden layer, recomputed by hand.
fn relu_pattern(net: &Mlp, x: &Tensor2) -> Vec<bool> {
    if net.spec().activation != Activation::Relu {
        return Vec::new();
    }
    let layers = &net.params().layers;
    let mut pattern = Vec::new();
    for r in 0..x.rows() {
        let mut h = x.row(r).to_vec();
        for layer in &layers[..layers.len() - 1] {
            let w = &layer.weight;
            let z: Vec<f64> = (0..w.cols())
                .map(|j| layer.bias[j] + (0..w.rows()).map(|i| h[i] * w.get(i, j)).sum::<f64>())
                .collect();
            pattern.extend(z.iter().map(|&v| v > 0.0));
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    pattern
}

fn kink_crossed(net: &Mlp, plus: &Mlp, minus: &Mlp, x: &Tensor2) -> bool {
    let base = relu_pattern(net, x);
    base != relu_pattern(plus, x) || base != relu_pattern(minus, x)
}

fn kink_crossed_input(net: &Mlp, xp: &Tensor2, xm: &Tensor2) -> bool {
    relu_pattern(net, xp) != relu_pattern(net, xm)
}

/// Exhaustive minimizer of the subset-mean loss over subsets of size at
/// least `gamma * n`. Losses are integers so means compare exactly. Ties go
/// to the smaller subset, then to the lexicographically smaller index list.
pub fn brute_force_selection(losses: &[i64], gamma: f64) -> Vec<usize> {
    let n = losses.len();
    let min_size = (gamma * n as f64 - 1e-9).ceil().max(1.0) as usize;
    let mut best: Option<(i64, usize, Vec<usize>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        if idx.len() < min_size {
            continue;
        }
        let sum: i64 = idx.iter().map(|&i| losses[i]).sum();
        let better = match &best {
            None => true,
            Some((bs, bn, bidx)) => {
                // sum / len < bs / bn, cross-multiplied.
                let lhs = sum * *bn as i64;
                let rhs = *bs * idx.len() as i64;
                lhs < rhs || (lhs == rhs && (idx.len() < *bn || (idx.len() == *bn && idx < *bidx)))
            }
        };
        if better {
            best = Some((sum, idx.len(), idx));
        }
    }
    best.unwrap().2
}

/// Logistic function written out directly.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
