//! Loss surfaces on the plane through three models, and distances between
//! checkpoints along a trajectory.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::lerp;
use crate::data::Dataset;
use crate::error::{FlmcError, Result};
use crate::nn::{self, LossKind, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    /// `min + (max - min) * j / (resolution - 1)`.
    pub fn coords(&self, resolution: usize) -> Vec<f64> {
        let m = (resolution - 1) as f64;
        (0..resolution)
            .map(|j| self.min + (self.max - self.min) * (j as f64 / m))
            .collect()
    }
}

impl Default for AxisRange {
    fn default() -> Self {
        AxisRange {
            min: -0.5,
            max: 1.5,
        }
    }
}

/// Plane `{theta + a (theta_k - theta) + b (theta_k' - theta)}`.
#[derive(Clone, Debug)]
pub struct PlaneSpec {
    pub origin: ModelParams,
    pub axis_a: ModelParams,
    pub axis_b: ModelParams,
    pub a_range: AxisRange,
    pub b_range: AxisRange,
    pub resolution: usize,
}

impl PlaneSpec {
    pub fn new(origin: ModelParams, axis_a: ModelParams, axis_b: ModelParams) -> Result<Self> {
        origin.check_compatible(&axis_a)?;
        origin.check_compatible(&axis_b)?;
        Ok(PlaneSpec {
            origin,
            axis_a,
            axis_b,
            a_range: AxisRange::default(),
            b_range: AxisRange::default(),
            resolution: 25,
        })
    }

    fn validate(&self) -> Result<()> {
        self.origin.check_compatible(&self.axis_a)?;
        self.origin.check_compatible(&self.axis_b)?;
        if self.resolution < 2 {
            return Err(FlmcError::domain(format!(
                "grid resolution must be at least 2, got {}",
                self.resolution
            )));
        }
        for r in [self.a_range, self.b_range] {
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(FlmcError::domain(format!("invalid axis range {:?}", r)));
            }
        }
        Ok(())
    }

    /// The model at plane coordinates `(a, b)`.
    ///
    /// On the axes (`b = 0` or `a = 0`) this is [`lerp`] towards the axis
    /// model, so the anchors are hit exactly and the `b = 0` row agrees with
    /// a linear-path traversal point for point.
    pub fn point(&self, a: f64, b: f64) -> Result<ModelParams> {
        if b == 0.0 {
            return lerp(&self.origin, &self.axis_a, a);
        }
        if a == 0.0 {
            return lerp(&self.origin, &self.axis_b, b);
        }
        plane_combination(&self.origin, &self.axis_a, &self.axis_b, a, b)
    }
}

/// `theta + a (theta_k - theta) + b (theta_k' - theta)`, entrywise.
pub fn plane_combination(
    origin: &ModelParams,
    axis_a: &ModelParams,
    axis_b: &ModelParams,
    a: f64,
    b: f64,
) -> Result<ModelParams> {
    origin.check_compatible(axis_a)?;
    origin.check_compatible(axis_b)?;
    let combine = |o: &Array2<f64>, x: &Array2<f64>, y: &Array2<f64>| {
        ndarray::Zip::from(o)
            .and(x)
            .and(y)
            .map_collect(|&o, &x, &y| o + a * (x - o) + b * (y - o))
    };
    ModelParams::new(
        *origin.arch(),
        combine(origin.hidden(), axis_a.hidden(), axis_b.hidden()),
        combine(origin.readout(), axis_a.readout(), axis_b.readout()),
    )
}

/// Loss and accuracy over the grid for one dataset. Entry `[i, j]` is at
/// `(a_coords[i], b_coords[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub dataset: String,
    pub a_coords: Vec<f64>,
    pub b_coords: Vec<f64>,
    pub loss: Array2<f64>,
    pub accuracy: Array2<f64>,
}

/// Evaluates every grid cell on every dataset. Cells are computed in
/// parallel and assembled by index.
pub fn hyperplane_grid(
    spec: &PlaneSpec,
    eval_sets: &[&Dataset],
    kind: LossKind,
) -> Result<Vec<GridResult>> {
    spec.validate()?;
    if eval_sets.is_empty() {
        return Err(FlmcError::domain(
            "hyperplane grid needs at least one dataset",
        ));
    }
    let res = spec.resolution;
    let a_coords = spec.a_range.coords(res);
    let b_coords = spec.b_range.coords(res);
    let cells: Vec<(usize, usize)> = (0..res)
        .flat_map(|i| (0..res).map(move |j| (i, j)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let p = spec.point(a_coords[i], b_coords[j])?;
            eval_sets
                .iter()
                .map(|d| nn::evaluate(&p, d, kind))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(eval_sets
        .iter()
        .enumerate()
        .map(|(s, d)| {
            let mut loss = Array2::zeros((res, res));
            let mut accuracy = Array2::zeros((res, res));
            for (&(i, j), v) in cells.iter().zip(&values) {
                loss[[i, j]] = v[s].loss;
                accuracy[[i, j]] = v[s].accuracy;
            }
            GridResult {
                dataset: d.name().to_string(),
                a_coords: a_coords.clone(),
                b_coords: b_coords.clone(),
                loss,
                accuracy,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDistances {
    pub labels: Vec<String>,
    /// Symmetric L2 distances between checkpoints.
    pub pairwise: Array2<f64>,
    /// Distance of every checkpoint to the reference model.
    pub to_reference: Vec<f64>,
}

/// Pairwise distances over labelled checkpoints and their distances to
/// `reference` (typically the shared initialisation).
pub fn trajectory_distances(
    checkpoints: &[(String, ModelParams)],
    reference: &ModelParams,
) -> Result<TrajectoryDistances> {
    if checkpoints.len() < 2 {
        return Err(FlmcError::domain(
            "trajectory needs at least two checkpoints",
        ));
    }
    for (_, p) in checkpoints {
        reference.check_compatible(p)?;
    }
    let k = checkpoints.len();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| checkpoints[i].1.distance(&checkpoints[j].1))
        .collect::<Result<Vec<_>>>()?;
    let mut pairwise = Array2::zeros((k, k));
    for (&(i, j), d) in pairs.iter().zip(dists) {
        pairwise[[i, j]] = d;
        pairwise[[j, i]] = d;
    }
    let to_reference = checkpoints
        .iter()
        .map(|(_, p)| p.distance(reference))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDistances {
        labels: checkpoints.iter().map(|(l, _)| l.clone()).collect(),
        pairwise,
        to_reference,
    })
}
