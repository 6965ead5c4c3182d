#![allow(dead_code)]

use flmc::data::Dataset;
use flmc::nn::{Architecture, LossKind, ModelParams, Scaling};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(r);
        std * z
    })
}

/// Random network with every parameter drawn fresh, readout included.
pub fn random_model(arch: Architecture, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let hidden = gaussian(&mut r, arch.hidden, arch.input_dim, 1.0);
    let readout = if arch.trains_readout() {
        gaussian(&mut r, arch.output_dim, arch.hidden, 1.0)
    } else {
        Array2::ones((arch.output_dim, arch.hidden))
    };
    ModelParams::new(arch, hidden, readout).unwrap()
}

/// Classification data with Gaussian features and uniform labels.
pub fn random_classification(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = gaussian(&mut r, n, d, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new("random", x, labels, classes).unwrap()
}

/// Regression data with Gaussian features and targets.
pub fn random_regression(n: usize, d: usize, outputs: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x = gaussian(&mut r, n, d, 1.0);
    let y = gaussian(&mut r, n, outputs, 1.0);
    Dataset::regression("random", x, y).unwrap()
}

/// `f(x) = scale * sum_i a_{c,i} max(0, sum_j w_{i,j} x_j)` by explicit loops.
pub fn brute_forward(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = p.arch();
    let scale = match arch.scaling {
        Scaling::MeanField => 1.0 / arch.hidden as f64,
        Scaling::Plain => 1.0,
    };
    (0..arch.output_dim)
        .map(|c| {
            let mut s = 0.0;
            for i in 0..arch.hidden {
                let mut z = 0.0;
                for (j, xj) in x.iter().enumerate() {
                    z += p.hidden()[[i, j]] * xj;
                }
                s += p.readout()[[c, i]] * z.max(0.0);
            }
            scale * s
        })
        .collect()
}

/// Mean loss by explicit loops over samples and outputs.
pub fn brute_loss(p: &ModelParams, data: &Dataset, kind: LossKind) -> f64 {
    let mut total = 0.0;
    for r in 0..data.len() {
        let x: Vec<f64> = data.features().row(r).to_vec();
        let f = brute_forward(p, &x);
        total += match kind {
            LossKind::Mse => (0..f.len())
                .map(|c| (f[c] - data.target(r, c)).powi(2))
                .sum::<f64>(),
            LossKind::CrossEntropy => {
                let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - f[data.labels()[r]]
            }
        };
    }
    total / data.len() as f64
}

pub fn arch(d: usize, n: usize, c: usize, scaling: Scaling) -> Architecture {
    Architecture::new(d, n, c, scaling).unwrap()
}

/// Copy of `p` with one parameter shifted by `delta`. Index runs over the
/// hidden matrix first, then the readout, both row-major.
pub fn nudge(p: &ModelParams, index: usize, delta: f64) -> ModelParams {
    let (arch, mut hidden, mut readout) = p.clone().into_parts();
    let nh = hidden.len();
    if index < nh {
        hidden.as_slice_mut().unwrap()[index] += delta;
    } else {
        readout.as_slice_mut().unwrap()[index - nh] += delta;
    }
    ModelParams::new(arch, hidden, readout).unwrap()
}

/// Smallest `|<w_i, x>|` over all neurons and samples.
pub fn min_preactivation(p: &ModelParams, data: &Dataset) -> f64 {
    let z = data.features().dot(&p.hidden().t());
    z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Relative error `||g - g_fd|| / ||g_fd||` between the backprop gradient
/// and central finite differences of the mean loss. Frozen readouts are
/// left out of both vectors.
pub fn fd_relative_error(p: &ModelParams, data: &Dataset, kind: LossKind) -> f64 {
    let g = flmc::nn::grad(p, data, kind).unwrap();
    let nh = p.hidden().len();
    let count = if p.arch().trains_readout() {
        p.arch().num_params()
    } else {
        nh
    };
    let analytic: Vec<f64> = g.iter_flat().copied().take(count).collect();
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in analytic.iter().enumerate() {
        let lp = flmc::nn::loss(&nudge(p, i, h), data, kind).unwrap();
        let lm = flmc::nn::loss(&nudge(p, i, -h), data, kind).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        num += (a - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}
