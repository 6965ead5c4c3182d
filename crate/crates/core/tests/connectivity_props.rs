mod common;

use common::*;
use flmc::connectivity::{
    self, barrier_from_profile, keep, path_point, BendInit, CurveFindConfig, DatasetObjective,
    Objective, Path,
};
use flmc::data::{dirichlet_partition, synth_gaussian, Dataset, Heterogeneity};
use flmc::fed::{self, FedConfig, LrSchedule};
use flmc::nn::{self, Gradient, LossKind, ModelParams, Scaling};
use ndarray::Array2;
use proptest::prelude::*;

fn pair(d: usize, n: usize, c: usize, s: Scaling, seed: u64) -> (ModelParams, ModelParams) {
    let a = arch(d, n, c, s);
    (random_model(a, seed), random_model(a, seed + 1000))
}

fn max_abs_diff(p: &ModelParams, q: &ModelParams) -> f64 {
    p.iter_flat()
        .zip(q.iter_flat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Two co-initialised FedAvg global modes at different heterogeneity.
fn trained_pair() -> (ModelParams, ModelParams, Dataset) {
    let data = synth_gaussian(3, 60, 6, 0.7, 12).unwrap();
    let init = ModelParams::init(arch(6, 24, 3, Scaling::MeanField), 12);
    let cfg = FedConfig {
        rounds: 10,
        local_iters: 5,
        batch_size: 10,
        lr: LrSchedule::Constant(0.05),
        momentum: 0.9,
        loss: LossKind::CrossEntropy,
        seed: 12,
        checkpoint_rounds: vec![],
        noise_rounds: vec![],
        eval_max_samples: None,
    };
    let run = |alpha| {
        let part =
            dirichlet_partition(data.labels(), 3, 5, Heterogeneity::Dirichlet(alpha), 12).unwrap();
        fed::run_fedavg(&init, &data, None, &part, &cfg)
            .unwrap()
            .final_model
    };
    (run(0.1), run(1.0), data)
}

#[test]
fn midpoint_bend_reproduces_the_linear_path() {
    let (p, q) = pair(3, 5, 2, Scaling::Plain, 1);
    let chain =
        Path::poly_chain(p.clone(), nn::interpolate(&p, &q, 0.5).unwrap(), q.clone()).unwrap();
    let line = Path::linear(p, q).unwrap();
    for nu in connectivity::unit_grid(101).unwrap() {
        let d = max_abs_diff(
            &path_point(&chain, nu).unwrap(),
            &path_point(&line, nu).unwrap(),
        );
        assert!(d < 1e-12, "nu={nu}: {d}");
    }
}

#[test]
fn traverse_matches_independent_interpolation() {
    let (p, q) = pair(4, 6, 3, Scaling::MeanField, 2);
    let data = random_classification(40, 4, 3, 3);
    let path = Path::linear(p.clone(), q.clone()).unwrap();
    let profile = connectivity::traverse(&path, &data, LossKind::CrossEntropy, 21).unwrap();
    assert_eq!(profile.len(), 21);
    assert_eq!(
        profile[0].loss,
        nn::loss(&p, &data, LossKind::CrossEntropy).unwrap()
    );
    assert_eq!(
        profile[20].loss,
        nn::loss(&q, &data, LossKind::CrossEntropy).unwrap()
    );
    for s in &profile[1..20] {
        let want = nn::loss(
            &nn::interpolate(&p, &q, s.nu).unwrap(),
            &data,
            LossKind::CrossEntropy,
        )
        .unwrap();
        assert!(
            (s.loss - want).abs() <= 1e-15 * want.max(1.0),
            "nu={}: {} vs {want}",
            s.nu,
            s.loss
        );
    }
}

#[test]
fn dense_grid_spike_and_excess_oracles() {
    // endpoints 1 and 2 with a tent peaking at 3 in the middle
    let nus = connectivity::unit_grid(1001).unwrap();
    let tent = |a: f64| {
        if a <= 0.5 {
            1.0 + 4.0 * a
        } else {
            3.0 - 2.0 * (a - 0.5)
        }
    };
    let losses: Vec<f64> = nus.iter().map(|&a| tent(a)).collect();
    let r = barrier_from_profile(&nus, &losses).unwrap();
    assert!((r.b - 1.0).abs() < 1e-12);
    assert_eq!(r.argmax_a, 0.5);
    assert!((r.connectivity_error() - 1.0).abs() < 1e-12);

    // flat endpoints at 1 with a 0.5 bump: excess 0.5
    let bump: Vec<f64> = nus
        .iter()
        .map(|&a| 1.0 + 0.5 * (1.0 - (2.0 * a - 1.0).abs()))
        .collect();
    let r = barrier_from_profile(&nus, &bump).unwrap();
    assert!((r.connectivity_error() - 0.5).abs() < 1e-12);

    let flat = vec![2.0; nus.len()];
    assert_eq!(
        barrier_from_profile(&nus, &flat)
            .unwrap()
            .connectivity_error(),
        0.0
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn barrier_bounds_and_argmax_on_grid(losses in proptest::collection::vec(0.0f64..10.0, 2..40)) {
        let nus = connectivity::unit_grid(losses.len()).unwrap();
        let r = barrier_from_profile(&nus, &losses).unwrap();
        let gap = (losses[0] - losses[losses.len() - 1]).abs();
        prop_assert!(r.absolute_barrier >= -gap);
        prop_assert!(r.b >= 0.0);
        prop_assert!(nus.contains(&r.argmax_a));
    }

    #[test]
    fn linear_barrier_is_symmetric(seed in 0u64..500) {
        let (p, q) = pair(3, 6, 2, Scaling::MeanField, seed);
        let data = random_classification(30, 3, 2, seed + 7);
        let fwd = connectivity::barrier(&Path::linear(p.clone(), q.clone()).unwrap(), &data, LossKind::CrossEntropy, 51).unwrap();
        let bwd = connectivity::barrier(&Path::linear(q, p).unwrap(), &data, LossKind::CrossEntropy, 51).unwrap();
        prop_assert!((fwd.b - bwd.b).abs() <= 1e-9 * (1.0 + fwd.b.abs()));
        prop_assert!((fwd.absolute_barrier - bwd.absolute_barrier).abs() <= 1e-12);
    }

    #[test]
    fn dissimilarity_is_a_pseudometric(seed in 0u64..500) {
        let a = arch(3, 5, 3, Scaling::Plain);
        let (p, q, r) = (random_model(a, seed), random_model(a, seed + 1), random_model(a, seed + 2));
        let data = random_classification(50, 3, 3, seed + 3);
        let d = |x: &ModelParams, y: &ModelParams| connectivity::function_dissimilarity(x, y, &data).unwrap();
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert_eq!(d(&p, &q), d(&q, &p));
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-15);
    }

    #[test]
    fn batched_dropout_errors_match_single_evaluations(seed in 0u64..200, s in prop_oneof![Just(Scaling::MeanField), Just(Scaling::Plain)]) {
        let p = random_model(arch(4, 8, 3, s), seed);
        let data = random_classification(60, 4, 3, seed + 1);
        let keeps: Vec<Vec<usize>> = (0..5).map(|t| keep::random_subset(8, 3 + t % 4, seed, t as u64).unwrap()).collect();
        let batch = connectivity::dropout_errors(&p, &keeps, &data, LossKind::CrossEntropy).unwrap();
        for (k, r) in keeps.iter().zip(&batch) {
            let single = connectivity::dropout_error(&p, k, &data, LossKind::CrossEntropy).unwrap();
            prop_assert!((single.eps_d - r.eps_d).abs() < 1e-12);
        }
    }
}

#[test]
fn permuted_network_has_zero_dissimilarity() {
    let p = random_model(arch(3, 6, 3, Scaling::MeanField), 4);
    let q = p.permute_neurons(&[5, 3, 1, 0, 2, 4]).unwrap();
    let data = random_classification(100, 3, 3, 5);
    assert_eq!(
        connectivity::function_dissimilarity(&p, &q, &data).unwrap(),
        0.0
    );
}

#[test]
fn dropout_of_identical_neurons_or_full_set_is_free() {
    let a = arch(3, 6, 2, Scaling::MeanField);
    let row = ndarray::array![0.3, -0.2, 0.9];
    let hidden = Array2::from_shape_fn((6, 3), |(_, j)| row[j]);
    let readout = Array2::from_shape_fn((2, 6), |(c, _)| if c == 0 { 1.5 } else { -0.5 });
    let p = ModelParams::new(a, hidden, readout).unwrap();
    let data = random_classification(40, 3, 2, 2);
    assert_eq!(
        connectivity::dropout_error(&p, &keep::first_half(6), &data, LossKind::CrossEntropy)
            .unwrap()
            .eps_d,
        0.0
    );
    let q = random_model(a, 3);
    let all: Vec<usize> = (0..6).collect();
    assert_eq!(
        connectivity::dropout_error(&q, &all, &data, LossKind::CrossEntropy)
            .unwrap()
            .eps_d,
        0.0
    );
}

/// `L(theta) = ||theta - center||^2` over all parameters.
struct Quadratic {
    center: ModelParams,
}

impl Objective for Quadratic {
    fn num_samples(&self) -> usize {
        1
    }

    fn grad_on(&self, params: &ModelParams, _batch: &[usize]) -> flmc::Result<Gradient> {
        Ok(Gradient {
            hidden: (params.hidden() - self.center.hidden()) * 2.0,
            readout: (params.readout() - self.center.readout()) * 2.0,
        })
    }
}

fn quadratic_config(steps: usize) -> CurveFindConfig {
    CurveFindConfig {
        steps,
        batch_size: 1,
        lr: 0.5,
        momentum: 0.0,
        bend_init: BendInit::Random,
        init_noise: 1.0,
        nu_per_step: 128,
        lr_decay: 0.1,
        seed: 9,
    }
}

#[test]
fn quadratic_bend_reaches_the_closed_form_optimum() {
    // E_nu ||pi(nu)||^2 is minimised at bend = -(theta1 + theta2) / 4
    let a = arch(4, 5, 2, Scaling::Plain);
    let (t1, t2) = (random_model(a, 1), random_model(a, 2));
    let objective = Quadratic {
        center: ModelParams::zeros(a),
    };
    let bend = connectivity::curve_find(&t1, &t2, &objective, &quadratic_config(4000)).unwrap();
    let target = nn::linear_combination(&[(-0.25, &t1), (-0.25, &t2)]).unwrap();
    let err = bend.distance(&target).unwrap();
    assert!(err < 1e-3, "error {err}");
}

#[test]
fn bend_at_a_shared_minimiser_does_not_move() {
    let a = arch(3, 4, 2, Scaling::MeanField);
    let t = random_model(a, 5);
    let objective = Quadratic { center: t.clone() };
    let mut cfg = quadratic_config(50);
    cfg.bend_init = BendInit::CopyStart;
    cfg.momentum = 0.9;
    assert_eq!(
        connectivity::curve_find(&t, &t, &objective, &cfg).unwrap(),
        t
    );
}

#[test]
fn curve_found_chain_is_no_worse_than_the_line() {
    let (p, q, data) = trained_pair();
    let cfg = CurveFindConfig {
        steps: 300,
        batch_size: 30,
        lr: 0.05,
        momentum: 0.9,
        bend_init: BendInit::Midpoint,
        init_noise: 0.0,
        nu_per_step: 4,
        lr_decay: 0.0,
        seed: 3,
    };
    let objective = DatasetObjective {
        data: &data,
        kind: LossKind::CrossEntropy,
    };
    let bend = connectivity::curve_find(&p, &q, &objective, &cfg).unwrap();
    let chain = Path::poly_chain(p.clone(), bend, q.clone()).unwrap();
    let line = Path::linear(p, q).unwrap();
    let ec = |path: &Path| {
        connectivity::connectivity_error(path, &data, LossKind::CrossEntropy, 51).unwrap()
    };
    assert!(
        ec(&chain) <= ec(&line) + 1e-3,
        "{} vs {}",
        ec(&chain),
        ec(&line)
    );
}

#[test]
fn grid_refinement_barely_moves_the_peak() {
    let (p, q, data) = trained_pair();
    let path = Path::linear(p, q).unwrap();
    let peak = |g| {
        connectivity::traverse(&path, &data, LossKind::CrossEntropy, g)
            .unwrap()
            .iter()
            .map(|s| s.loss)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (coarse, fine) = (peak(101), peak(1001));
    assert!((fine - coarse).abs() < 0.01 * fine, "{coarse} vs {fine}");
}

#[test]
fn seven_path_of_a_symmetric_network_to_itself_is_flat() {
    let a = arch(3, 6, 1, Scaling::MeanField);
    let half = random_model(arch(3, 3, 1, Scaling::MeanField), 7);
    let hidden =
        ndarray::concatenate![ndarray::Axis(0), half.hidden().view(), half.hidden().view()];
    let p = ModelParams::new(a, hidden, Array2::ones((1, 6))).unwrap();
    let data = random_regression(30, 3, 1, 8);
    let waypoints = connectivity::seven_segment_path(&p, &p).unwrap();
    assert_eq!(waypoints.len(), 8);
    let profile = connectivity::profile_waypoints(&waypoints, &data, LossKind::Mse, 15).unwrap();
    let l0 = profile[0].loss;
    for s in &profile {
        assert!(
            (s.loss - l0).abs() < 1e-12,
            "nu={}: {} vs {l0}",
            s.nu,
            s.loss
        );
    }
}

#[test]
fn seven_path_waypoints_realise_the_subnetworks() {
    for n in [6, 7] {
        let (p, q) = pair(3, n, 2, Scaling::MeanField, 40 + n as u64);
        let w = connectivity::seven_segment_path(&p, &q).unwrap();
        let keep = connectivity::seven_segment_keep(n);
        let sub_p = nn::dropout_subnetwork(&p, &keep).unwrap();
        let sub_q = nn::dropout_subnetwork(&q, &keep).unwrap();
        let xs = random_regression(20, 3, 1, 9);
        let f = |m: &ModelParams| nn::forward_batch(m, xs.features().view()).unwrap();
        let close = |a: Array2<f64>, b: Array2<f64>| (a - b).iter().all(|v| v.abs() < 1e-12);
        assert_eq!(w[0], p);
        assert_eq!(w[7], q);
        for (i, want) in [
            (1, &sub_p),
            (2, &sub_p),
            (3, &sub_q),
            (4, &sub_q),
            (5, &sub_q),
            (6, &sub_q),
        ] {
            assert!(close(f(&w[i]), f(want)), "N={n} waypoint {i}");
        }
    }
}

#[test]
fn seven_path_bound_on_random_mse_pairs() {
    for seed in 0..10 {
        let (p, q) = pair(4, 8, 1, Scaling::MeanField, seed);
        let data = random_regression(40, 4, 1, seed + 100);
        let (profile, s) =
            flmc::experiment::seven_path_profile(&p, &q, &data, LossKind::Mse, 15).unwrap();
        assert_eq!(profile.len(), 7 * 14 + 1);
        assert!(
            s.bound_holds,
            "seed {seed}: {} > {}",
            s.max_path_loss, s.bound
        );
    }
}

#[test]
fn weight_distance_hand_cases() {
    let t0 = random_model(arch(3, 4, 2, Scaling::Plain), 1);
    let double = nn::linear_combination(&[(2.0, &t0)]).unwrap();
    assert_eq!(connectivity::weight_distance(&t0, &t0, &t0).unwrap(), 0.0);
    assert!((connectivity::weight_distance(&t0, &double, &t0).unwrap() - 1.0).abs() < 1e-15);
}
