mod common;

use common::*;
use flmc::data::{dirichlet_partition, synth_gaussian, Dataset, Heterogeneity, Partition};
use flmc::fed::{self, BatchSampler, FedConfig, LrSchedule};
use flmc::nn::{self, Gradient, LossKind, ModelParams, Scaling};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rayon::prelude::*;

fn config(
    rounds: usize,
    iters: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    loss: LossKind,
) -> FedConfig {
    FedConfig {
        rounds,
        local_iters: iters,
        batch_size: batch,
        lr: LrSchedule::Constant(lr),
        momentum,
        loss,
        seed: 17,
        checkpoint_rounds: vec![],
        noise_rounds: vec![],
        eval_max_samples: None,
    }
}

/// Plain SGD over the whole dataset with the round-`m` sampling stream of
/// client 0 and momentum reset at each round boundary.
fn centralized(init: &ModelParams, data: &Dataset, cfg: &FedConfig) -> ModelParams {
    let mut p = init.clone();
    let lr = cfg.lr.at(1) * init.arch().step_scale();
    for round in 1..=cfg.rounds {
        let mut sampler = BatchSampler::new(
            data.len(),
            cfg.batch_size,
            fed::client_stream(cfg.seed, round, 0),
        );
        let mut v = Gradient::zeros(init.arch());
        for _ in 0..cfg.local_iters {
            let batch = data.subset(&sampler.next_batch()).unwrap();
            (p, v) = nn::sgd_step(&p, &batch, cfg.loss, lr, cfg.momentum, &v).unwrap();
        }
    }
    p
}

#[test]
fn single_client_reproduces_centralized_sgd_bit_exactly() {
    let data = synth_gaussian(3, 40, 6, 0.5, 2).unwrap();
    let part = dirichlet_partition(data.labels(), 3, 1, Heterogeneity::Iid, 2).unwrap();
    for (scaling, rounds, iters, momentum) in [
        (Scaling::MeanField, 1, 200, 0.9),
        (Scaling::Plain, 200, 1, 0.0),
        (Scaling::MeanField, 20, 10, 0.5),
    ] {
        let init = ModelParams::init(arch(6, 16, 3, scaling), 5);
        let cfg = config(rounds, iters, 10, 0.01, momentum, LossKind::CrossEntropy);
        let run = fed::run_fedavg(&init, &data, None, &part, &cfg).unwrap();
        assert_eq!(
            run.final_model,
            centralized(&init, &data, &cfg),
            "{scaling:?} M={rounds} p={iters}"
        );
    }
}

#[test]
fn aggregation_ignores_completion_order() {
    let data = synth_gaussian(4, 50, 5, 0.4, 8).unwrap();
    let part = dirichlet_partition(data.labels(), 4, 6, Heterogeneity::Dirichlet(0.3), 8).unwrap();
    let init = ModelParams::init(arch(5, 12, 4, Scaling::MeanField), 3);
    let cfg = config(1, 5, 8, 0.05, 0.9, LossKind::CrossEntropy);
    let shards: Vec<Dataset> = part
        .client_indices
        .iter()
        .map(|i| data.subset(i).unwrap())
        .collect();
    let train = |k: usize| {
        fed::local_train(&init, &shards[k], &cfg, fed::client_stream(cfg.seed, 1, k)).unwrap()
    };
    let in_order: Vec<ModelParams> = (0..shards.len()).map(train).collect();
    let reference = fed::aggregate(&in_order, &part.weights()).unwrap();
    for trial in 0..5 {
        let mut order: Vec<usize> = (0..shards.len()).collect();
        order.shuffle(&mut rng(trial));
        let mut arrived: Vec<(usize, ModelParams)> =
            order.par_iter().map(|&k| (k, train(k))).collect();
        arrived.sort_by_key(|(k, _)| *k);
        let models: Vec<ModelParams> = arrived.into_iter().map(|(_, m)| m).collect();
        assert_eq!(fed::aggregate(&models, &part.weights()).unwrap(), reference);
    }
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let full = config(3, 4, 8, 0.05, 0.9, LossKind::CrossEntropy);
    let a = one.install(|| fed::run_fedavg(&init, &data, None, &part, &full).unwrap());
    let b = four.install(|| fed::run_fedavg(&init, &data, None, &part, &full).unwrap());
    assert_eq!(a.final_model, b.final_model);
}

fn noisy_run(
    noise_rounds: Vec<usize>,
) -> (fed::FedRun, Dataset, Partition, ModelParams, FedConfig) {
    let data = synth_gaussian(3, 60, 5, 0.6, 4).unwrap();
    let part = dirichlet_partition(data.labels(), 3, 4, Heterogeneity::Dirichlet(0.2), 4).unwrap();
    let init = ModelParams::init(arch(5, 10, 3, Scaling::MeanField), 6);
    let mut cfg = config(3, 4, 6, 0.05, 0.9, LossKind::CrossEntropy);
    cfg.noise_rounds = noise_rounds;
    let run = fed::run_fedavg(&init, &data, None, &part, &cfg).unwrap();
    (run, data, part, init, cfg)
}

#[test]
fn recording_noise_does_not_change_training() {
    let (with, ..) = noisy_run(vec![1, 3]);
    let (without, ..) = noisy_run(vec![]);
    assert_eq!(with.final_model, without.final_model);
    assert_eq!(with.noise.len(), 2 * 3);
}

#[test]
fn noise_records_satisfy_the_triangle_inequality() {
    let (run, ..) = noisy_run(vec![1, 2, 3]);
    for r in &run.noise {
        for i in 0..r.norms.len() {
            assert!(r.norms[i] >= 0.0);
            assert!(r.norms[i] <= r.drift_norms[i] + r.bias_norms[i] + 1e-15);
        }
    }
}

#[test]
fn logged_noise_matches_a_replayed_first_iteration() {
    let (run, data, part, init, cfg) = noisy_run(vec![1]);
    let lr = cfg.lr.at(1) * init.arch().step_scale();
    let mut models = Vec::new();
    let mut next_batches = Vec::new();
    for (k, idx) in part.client_indices.iter().enumerate() {
        let shard = data.subset(idx).unwrap();
        let mut sampler = BatchSampler::new(
            shard.len(),
            cfg.batch_size,
            fed::client_stream(cfg.seed, 1, k),
        );
        let b0 = shard.subset(&sampler.next_batch()).unwrap();
        let (m, _) = nn::sgd_step(
            &init,
            &b0,
            cfg.loss,
            lr,
            cfg.momentum,
            &Gradient::zeros(init.arch()),
        )
        .unwrap();
        models.push(m);
        next_batches.push(shard.subset(&sampler.next_batch()).unwrap());
    }
    let avg = fed::aggregate(&models, &part.weights()).unwrap();
    let dec =
        fed::noise_decompose(&models, &next_batches, &part.weights(), &avg, cfg.loss).unwrap();
    assert_eq!(run.noise[0], dec.record(1, 1));
}

#[test]
fn identical_shards_have_no_noise() {
    let base = synth_gaussian(2, 10, 4, 0.5, 1).unwrap();
    let m = base.len();
    let idx: Vec<usize> = (0..m).chain(0..m).collect();
    let doubled = base.subset(&idx).unwrap();
    let part = Partition {
        client_indices: vec![(0..m).collect(), (m..2 * m).collect()],
        heterogeneity: Heterogeneity::Iid,
        seed: 0,
    };
    let init = ModelParams::init(arch(4, 8, 2, Scaling::MeanField), 2);
    let mut cfg = config(2, 5, m, 0.05, 0.5, LossKind::CrossEntropy);
    cfg.noise_rounds = vec![1, 2];
    let run = fed::run_fedavg(&init, &doubled, None, &part, &cfg).unwrap();
    assert!(!run.noise.is_empty());
    for r in &run.noise {
        assert!(r.norms.iter().all(|&v| v == 0.0), "{:?}", r.norms);
    }
}

/// `sum_k w_k mean_x` of the per-neuron drift and bias vectors, computed
/// one sample, neuron and output at a time.
fn noise_by_loops(
    models: &[ModelParams],
    batches: &[Dataset],
    weights: &[f64],
    avg: &ModelParams,
    kind: LossKind,
) -> (Array2<f64>, Array2<f64>) {
    let a = avg.arch();
    let residual = |p: &ModelParams, data: &Dataset, r: usize| -> Vec<f64> {
        let f = brute_forward(p, data.features().row(r).as_slice().unwrap());
        match kind {
            LossKind::Mse => (0..f.len()).map(|c| data.target(r, c) - f[c]).collect(),
            LossKind::CrossEntropy => {
                let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = f.iter().map(|v| (v - m).exp()).sum();
                (0..f.len())
                    .map(|c| (c == data.labels()[r]) as u8 as f64 - (f[c] - m).exp() / z)
                    .collect()
            }
        }
    };
    let mut drift = Array2::zeros((a.hidden, a.input_dim));
    let mut bias = Array2::zeros((a.hidden, a.input_dim));
    for ((model, batch), &w) in models.iter().zip(batches).zip(weights) {
        for r in 0..batch.len() {
            let x = batch.features().row(r);
            let rc = residual(model, batch, r);
            let ra = residual(avg, batch, r);
            for i in 0..a.hidden {
                let gk = nn::neuron_activation_grad(model, x, i).unwrap();
                let gbar = nn::neuron_activation_grad(avg, x, i).unwrap();
                let mut d = Array1::<f64>::zeros(a.input_dim);
                let mut b = Array1::<f64>::zeros(a.input_dim);
                for c in 0..a.output_dim {
                    let (ak, abar) = (model.readout()[[c, i]], avg.readout()[[c, i]]);
                    d = d + &gk * (ak * rc[c]) - &gbar * (abar * rc[c]);
                    b = b + &gbar * (abar * (rc[c] - ra[c]));
                }
                let s = w / batch.len() as f64;
                drift.row_mut(i).scaled_add(s, &d);
                bias.row_mut(i).scaled_add(s, &b);
            }
        }
    }
    (drift, bias)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn noise_decomposition_matches_per_sample_loops(
        d in 1usize..5, n in 1usize..7, c in 1usize..4, clients in 1usize..4,
        ce in any::<bool>(), seed in 0u64..1000
    ) {
        let kind = if ce { LossKind::CrossEntropy } else { LossKind::Mse };
        let c = if ce { c.max(2) } else { c };
        let ar = arch(d, n, c, Scaling::MeanField);
        let models: Vec<ModelParams> = (0..clients).map(|k| random_model(ar, seed + k as u64)).collect();
        let batches: Vec<Dataset> = (0..clients)
            .map(|k| {
                if ce {
                    random_classification(4, d, c, seed + 50 + k as u64)
                } else {
                    random_regression(4, d, c, seed + 50 + k as u64)
                }
            })
            .collect();
        let raw: Vec<f64> = (1..=clients).map(|k| k as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let avg = fed::aggregate(&models, &weights).unwrap();
        let dec = fed::noise_decompose(&models, &batches, &weights, &avg, kind).unwrap();
        let (drift, bias) = noise_by_loops(&models, &batches, &weights, &avg, kind);
        for (got, want) in [(&dec.drift, &drift), (&dec.bias, &bias)] {
            for (g, w) in got.iter().zip(want.iter()) {
                prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{g} vs {w}");
            }
        }
    }
}

#[test]
fn scalar_mse_noise_matches_the_two_term_identity() {
    // (y - ŷ_k)(∇σ_k - ∇σ̄) + (ȳ - ŷ_k)∇σ̄ for unit-readout networks
    let ar = arch(3, 4, 1, Scaling::MeanField);
    let models = [random_model(ar, 1), random_model(ar, 2)];
    let batches = [random_regression(5, 3, 1, 3), random_regression(5, 3, 1, 4)];
    let weights = [0.25, 0.75];
    let avg = fed::aggregate(&models, &weights).unwrap();
    let dec = fed::noise_decompose(&models, &batches, &weights, &avg, LossKind::Mse).unwrap();
    let mut total = Array2::<f64>::zeros((4, 3));
    for k in 0..2 {
        for r in 0..5 {
            let x = batches[k].features().row(r);
            let y = batches[k].target(r, 0);
            let yk = nn::forward(&models[k], x).unwrap()[0];
            let ybar = nn::forward(&avg, x).unwrap()[0];
            for i in 0..4 {
                let gk = nn::neuron_activation_grad(&models[k], x, i).unwrap();
                let gb = nn::neuron_activation_grad(&avg, x, i).unwrap();
                let n_i = (&gk - &gb) * (y - yk) + &gb * (ybar - yk);
                total.row_mut(i).scaled_add(weights[k] / 5.0, &n_i);
            }
        }
    }
    for (g, w) in dec.total().iter().zip(total.iter()) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}
