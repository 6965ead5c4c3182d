mod common;

use common::*;
use flmc::connectivity::{self, Path};
use flmc::landscape::{hyperplane_grid, trajectory_distances, AxisRange, PlaneSpec};
use flmc::nn::{self, LossKind, ModelParams, Scaling};

fn anchors(seed: u64) -> (ModelParams, ModelParams, ModelParams) {
    let a = arch(4, 6, 3, Scaling::MeanField);
    (
        random_model(a, seed),
        random_model(a, seed + 1),
        random_model(a, seed + 2),
    )
}

fn unit_spec(o: &ModelParams, x: &ModelParams, y: &ModelParams, res: usize) -> PlaneSpec {
    let mut spec = PlaneSpec::new(o.clone(), x.clone(), y.clone()).unwrap();
    spec.a_range = AxisRange { min: 0.0, max: 1.0 };
    spec.b_range = AxisRange { min: 0.0, max: 1.0 };
    spec.resolution = res;
    spec
}

#[test]
fn interior_cell_matches_direct_assembly() {
    let (o, x, y) = anchors(1);
    let data = random_classification(50, 4, 3, 4);
    let g =
        &hyperplane_grid(&unit_spec(&o, &x, &y, 11), &[&data], LossKind::CrossEntropy).unwrap()[0];
    assert_eq!((g.a_coords[3], g.b_coords[4]), (0.3, 0.4));
    let combine = |p: &ndarray::Array2<f64>, q: &ndarray::Array2<f64>, r: &ndarray::Array2<f64>| {
        ndarray::Array2::from_shape_fn(p.dim(), |ix| {
            p[ix] + 0.3 * (q[ix] - p[ix]) + 0.4 * (r[ix] - p[ix])
        })
    };
    let direct = ModelParams::new(
        *o.arch(),
        combine(o.hidden(), x.hidden(), y.hidden()),
        combine(o.readout(), x.readout(), y.readout()),
    )
    .unwrap();
    let want = nn::loss(&direct, &data, LossKind::CrossEntropy).unwrap();
    assert!((g.loss[[3, 4]] - want).abs() <= 1e-15 * want.max(1.0));
    assert_eq!(g.loss.dim(), (11, 11));
    assert_eq!(
        g.loss[[0, 0]],
        nn::loss(&o, &data, LossKind::CrossEntropy).unwrap()
    );
    assert_eq!(
        g.loss[[10, 0]],
        nn::loss(&x, &data, LossKind::CrossEntropy).unwrap()
    );
    assert_eq!(
        g.loss[[0, 10]],
        nn::loss(&y, &data, LossKind::CrossEntropy).unwrap()
    );
}

#[test]
fn a_axis_row_equals_linear_traversal() {
    let (o, x, y) = anchors(7);
    let data = random_classification(40, 4, 3, 8);
    let g =
        &hyperplane_grid(&unit_spec(&o, &x, &y, 13), &[&data], LossKind::CrossEntropy).unwrap()[0];
    let profile = connectivity::traverse(
        &Path::linear(o, x).unwrap(),
        &data,
        LossKind::CrossEntropy,
        13,
    )
    .unwrap();
    for (i, s) in profile.iter().enumerate() {
        assert_eq!(g.a_coords[i], s.nu);
        assert_eq!(g.loss[[i, 0]], s.loss, "cell {i}");
        assert_eq!(g.accuracy[[i, 0]], s.accuracy);
    }
}

#[test]
fn grid_is_bit_identical_across_thread_counts() {
    let (o, x, y) = anchors(3);
    let data = random_classification(60, 4, 3, 5);
    let spec = PlaneSpec::new(o, x, y).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| hyperplane_grid(&spec, &[&data], LossKind::CrossEntropy).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn duplicate_checkpoints_are_at_distance_zero() {
    let (o, x, _) = anchors(9);
    let cps = vec![
        ("a".to_string(), x.clone()),
        ("b".to_string(), x.clone()),
        ("c".to_string(), o.clone()),
    ];
    let t = trajectory_distances(&cps, &o).unwrap();
    assert_eq!(t.pairwise[[0, 1]], 0.0);
    assert_eq!(t.pairwise[[0, 2]], t.pairwise[[2, 0]]);
    assert_eq!(t.to_reference[2], 0.0);
    assert!((t.pairwise[[1, 2]] - x.distance(&o).unwrap()).abs() < 1e-12);
}
