//! Paths between modes and the measurements taken along them.

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlmcError, Result};
use crate::fed::BatchSampler;
use crate::nn::{self, Gradient, LossKind, ModelParams};
use crate::rng::{self, Purpose};

/// Default number of grid points for barrier evaluation.
pub const BARRIER_GRID: usize = 51;
/// Default number of grid points per segment of a multi-segment path.
pub const SEGMENT_GRID: usize = 25;
/// Floor on the endpoint-loss gap in the barrier denominator.
pub const BARRIER_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Path {
    Linear {
        start: ModelParams,
        end: ModelParams,
    },
    /// Two segments joined at a bend; `pi(0.5) = bend`.
    PolyChain {
        start: ModelParams,
        bend: ModelParams,
        end: ModelParams,
    },
}

impl Path {
    pub fn linear(start: ModelParams, end: ModelParams) -> Result<Path> {
        start.check_compatible(&end)?;
        Ok(Path::Linear { start, end })
    }

    pub fn poly_chain(start: ModelParams, bend: ModelParams, end: ModelParams) -> Result<Path> {
        start.check_compatible(&bend)?;
        start.check_compatible(&end)?;
        Ok(Path::PolyChain { start, bend, end })
    }

    pub fn start(&self) -> &ModelParams {
        match self {
            Path::Linear { start, .. } | Path::PolyChain { start, .. } => start,
        }
    }

    pub fn end(&self) -> &ModelParams {
        match self {
            Path::Linear { end, .. } | Path::PolyChain { end, .. } => end,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Path::Linear { .. } => "linear",
            Path::PolyChain { .. } => "polychain",
        }
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if (0.0..=1.0).contains(&nu) {
        Ok(())
    } else {
        Err(FlmcError::domain(format!(
            "path parameter {nu} outside [0, 1]"
        )))
    }
}

/// Coefficient of the bend in `pi(nu)`, which is also `d pi / d bend`.
fn bend_coefficient(nu: f64) -> f64 {
    if nu <= 0.5 {
        2.0 * nu
    } else {
        2.0 * (1.0 - nu)
    }
}

/// Point `a` of the segment from `p` to `q`, written as `p + a (q - p)` for
/// `a <= 0.5` and `q + (1 - a)(p - q)` above. Both endpoints are reproduced
/// exactly, and so is every point of a segment whose endpoints coincide.
pub fn lerp(p: &ModelParams, q: &ModelParams, a: f64) -> Result<ModelParams> {
    p.check_compatible(q)?;
    let (base, other, t) = if a <= 0.5 { (p, q, a) } else { (q, p, 1.0 - a) };
    let hidden = ndarray::Zip::from(base.hidden())
        .and(other.hidden())
        .map_collect(|&x, &y| x + t * (y - x));
    let readout = ndarray::Zip::from(base.readout())
        .and(other.readout())
        .map_collect(|&x, &y| x + t * (y - x));
    ModelParams::new(*p.arch(), hidden, readout)
}

/// `pi(nu)`.
///
/// Linear: `(1 - nu) start + nu end`, evaluated with [`lerp`].
/// PolyChain: `2[(0.5 - nu) start + nu bend]` for `nu <= 0.5` and
/// `2[(nu - 0.5) end + (1 - nu) bend]` above, so both endpoints are hit.
pub fn path_point(path: &Path, nu: f64) -> Result<ModelParams> {
    check_nu(nu)?;
    match path {
        Path::Linear { start, end } => lerp(start, end, nu),
        Path::PolyChain { start, bend, end } => {
            if nu <= 0.5 {
                nn::linear_combination(&[(2.0 * (0.5 - nu), start), (2.0 * nu, bend)])
            } else {
                nn::linear_combination(&[(2.0 * (nu - 0.5), end), (2.0 * (1.0 - nu), bend)])
            }
        }
    }
}

/// `j / (points - 1)` for `j = 0..points`.
pub fn unit_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(FlmcError::domain(format!(
            "grid needs at least 2 points, got {points}"
        )));
    }
    let m = (points - 1) as f64;
    Ok((0..points).map(|j| j as f64 / m).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathSample {
    pub nu: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and accuracy at `nu = j / (grid - 1)`, in grid order.
pub fn traverse(
    path: &Path,
    data: &Dataset,
    kind: LossKind,
    grid: usize,
) -> Result<Vec<PathSample>> {
    let nus = unit_grid(grid)?;
    traverse_at(path, data, kind, &nus)
}

/// Loss and accuracy at arbitrary path parameters, in the order given.
pub fn traverse_at(
    path: &Path,
    data: &Dataset,
    kind: LossKind,
    nus: &[f64],
) -> Result<Vec<PathSample>> {
    nus.par_iter()
        .map(|&nu| {
            let e = nn::evaluate(&path_point(path, nu)?, data, kind)?;
            Ok(PathSample {
                nu,
                loss: e.loss,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BarrierResult {
    /// `max_a |L(pi(a)) - min(L0, L1)| / max(|L0 - L1|, guard) - 1`, floored
    /// at 0. The floor only binds when the guard does.
    pub b: f64,
    /// `max_a L(pi(a)) - max(L0, L1)`.
    pub absolute_barrier: f64,
    /// Grid point attaining the maximum in `b`.
    pub argmax_a: f64,
    pub grid_size: usize,
    pub loss_start: f64,
    pub loss_end: f64,
}

impl BarrierResult {
    /// `max(0, absolute_barrier)`.
    pub fn connectivity_error(&self) -> f64 {
        self.absolute_barrier.max(0.0)
    }
}

/// Barrier of a loss profile whose first and last entries are the endpoints.
pub fn barrier_from_profile(nus: &[f64], losses: &[f64]) -> Result<BarrierResult> {
    if nus.len() != losses.len() || nus.len() < 2 {
        return Err(FlmcError::shape(format!(
            "profile needs matching grids of at least 2 points, got {} and {}",
            nus.len(),
            losses.len()
        )));
    }
    let l0 = losses[0];
    let l1 = *losses.last().unwrap();
    let low = l0.min(l1);
    let mut best = 0;
    for (j, l) in losses.iter().enumerate() {
        if (l - low).abs() > (losses[best] - low).abs() {
            best = j;
        }
    }
    let peak = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = (l0 - l1).abs().max(BARRIER_GUARD);
    Ok(BarrierResult {
        b: ((losses[best] - low).abs() / denom - 1.0).max(0.0),
        absolute_barrier: peak - l0.max(l1),
        argmax_a: nus[best],
        grid_size: nus.len(),
        loss_start: l0,
        loss_end: l1,
    })
}

pub fn barrier(path: &Path, data: &Dataset, kind: LossKind, grid: usize) -> Result<BarrierResult> {
    let profile = traverse(path, data, kind, grid)?;
    let nus: Vec<f64> = profile.iter().map(|p| p.nu).collect();
    let losses: Vec<f64> = profile.iter().map(|p| p.loss).collect();
    barrier_from_profile(&nus, &losses)
}

/// `max(0, max_nu L(pi(nu)) - max(L(start), L(end)))` over the grid.
pub fn connectivity_error(path: &Path, data: &Dataset, kind: LossKind, grid: usize) -> Result<f64> {
    barrier(path, data, kind, grid).map(|b| b.connectivity_error())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BendInit {
    Midpoint,
    CopyStart,
    /// Midpoint plus Gaussian noise of standard deviation `init_noise`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFindConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default = "default_bend_init")]
    pub bend_init: BendInit,
    #[serde(default)]
    pub init_noise: f64,
    /// Path parameters drawn per step, one per stratum of `[0, 1]`.
    #[serde(default = "default_nu_per_step")]
    pub nu_per_step: usize,
    /// Step `t` uses `lr / (1 + lr_decay * t)`.
    #[serde(default)]
    pub lr_decay: f64,
    pub seed: u64,
}

fn default_bend_init() -> BendInit {
    BendInit::Midpoint
}

fn default_nu_per_step() -> usize {
    1
}

impl CurveFindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FlmcError::config("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlmcError::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FlmcError::config("momentum", "must lie in [0, 1)"));
        }
        if self.nu_per_step == 0 {
            return Err(FlmcError::config("nu_per_step", "must be at least 1"));
        }
        if [self.lr_decay, self.init_noise]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(FlmcError::config(
                "lr_decay",
                "lr_decay and init_noise must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A differentiable loss over an indexed sample set.
pub trait Objective: Sync {
    fn num_samples(&self) -> usize;
    fn grad_on(&self, params: &ModelParams, batch: &[usize]) -> Result<Gradient>;
}

/// Mean loss of a network on a dataset.
pub struct DatasetObjective<'a> {
    pub data: &'a Dataset,
    pub kind: LossKind,
}

impl Objective for DatasetObjective<'_> {
    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn grad_on(&self, params: &ModelParams, batch: &[usize]) -> Result<Gradient> {
        nn::grad(params, &self.data.subset(batch)?, self.kind)
    }
}

fn initial_bend(
    start: &ModelParams,
    end: &ModelParams,
    cfg: &CurveFindConfig,
) -> Result<ModelParams> {
    let mid = nn::interpolate(start, end, 0.5)?;
    match cfg.bend_init {
        BendInit::Midpoint => Ok(mid),
        BendInit::CopyStart => Ok(start.clone()),
        BendInit::Random => {
            let mut r = rng::stream(cfg.seed, Purpose::CurveFind, u64::MAX, 0);
            let normal = rand_distr::Normal::new(0.0, cfg.init_noise)
                .map_err(|e| FlmcError::config("init_noise", e.to_string()))?;
            let (arch, mut hidden, mut readout) = mid.into_parts();
            use rand_distr::Distribution;
            hidden.mapv_inplace(|v| v + normal.sample(&mut r));
            if arch.trains_readout() {
                readout.mapv_inplace(|v| v + normal.sample(&mut r));
            }
            ModelParams::new(arch, hidden, readout)
        }
    }
}

/// Optimises the bend of a PolyChain between frozen endpoints by SGD on
/// `E_{nu ~ U(0,1)} L(pi(nu))`.
///
/// Each step draws `nu_per_step` stratified values of `nu` and one
/// mini-batch shared by all of them, and averages
/// `(d pi / d bend)(nu) * grad L(pi(nu))`. The step size is scaled like
/// client training ([`nn::Architecture::step_scale`]).
pub fn curve_find<O: Objective>(
    start: &ModelParams,
    end: &ModelParams,
    objective: &O,
    cfg: &CurveFindConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    start.check_compatible(end)?;
    if objective.num_samples() == 0 {
        return Err(FlmcError::domain(
            "curve finding needs a nonempty objective",
        ));
    }
    let arch = *start.arch();
    let mut bend = initial_bend(start, end, cfg)?;
    let mut velocity = Gradient::zeros(&arch);
    let mut sampler = BatchSampler::new(
        objective.num_samples(),
        cfg.batch_size,
        rng::stream(cfg.seed, Purpose::CurveFind, 0, 0),
    );
    let mut nu_rng = rng::stream(cfg.seed, Purpose::CurveFind, 1, 0);
    let strata = cfg.nu_per_step as f64;
    for t in 0..cfg.steps {
        let batch = sampler.next_batch();
        let nus: Vec<f64> = (0..cfg.nu_per_step)
            .map(|s| (s as f64 + nu_rng.random::<f64>()) / strata)
            .collect();
        let path = Path::PolyChain {
            start: start.clone(),
            bend: bend.clone(),
            end: end.clone(),
        };
        let parts = nus
            .par_iter()
            .map(|&nu| {
                let g = objective.grad_on(&path_point(&path, nu)?, &batch)?;
                Ok((bend_coefficient(nu) / strata, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Gradient::zeros(&arch);
        for (c, part) in parts {
            g.hidden.scaled_add(c, &part.hidden);
            g.readout.scaled_add(c, &part.readout);
        }
        let lr = cfg.lr / (1.0 + cfg.lr_decay * t as f64) * arch.step_scale();
        nn::apply_momentum_step(&mut bend, &mut velocity, g, lr, cfg.momentum)?;
    }
    Ok(bend)
}

/// Neuron subsets for dropout measurements.
pub mod keep {
    use super::*;

    /// The first `ceil(N/2)` neurons.
    pub fn first_half(n: usize) -> Vec<usize> {
        (0..n.div_ceil(2)).collect()
    }

    /// The first `max(1, round(frac * N))` neurons.
    pub fn first_fraction(n: usize, frac: f64) -> Result<Vec<usize>> {
        Ok((0..fraction_size(n, frac)?).collect())
    }

    /// `size` distinct neurons drawn uniformly from the stream of `(seed, trial)`,
    /// returned in ascending order.
    pub fn random_subset(n: usize, size: usize, seed: u64, trial: u64) -> Result<Vec<usize>> {
        if size == 0 || size > n {
            return Err(FlmcError::domain(format!(
                "cannot keep {size} of {n} neurons"
            )));
        }
        let mut r = rng::stream(seed, Purpose::DropoutSubset, trial, n as u64);
        let mut v = sample(&mut r, n, size).into_vec();
        v.sort_unstable();
        Ok(v)
    }

    pub fn fraction_size(n: usize, frac: f64) -> Result<usize> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(FlmcError::domain(format!(
                "keep fraction {frac} outside (0, 1]"
            )));
        }
        Ok(((frac * n as f64).round() as usize).clamp(1, n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropoutResult {
    pub keep: Vec<usize>,
    pub eps_d: f64,
    pub full_loss: f64,
    pub subnet_loss: f64,
}

/// `|L(theta) - L(dropout_subnetwork(theta, keep))|`.
pub fn dropout_error(
    params: &ModelParams,
    keep: &[usize],
    data: &Dataset,
    kind: LossKind,
) -> Result<DropoutResult> {
    let full_loss = nn::loss(params, data, kind)?;
    let subnet_loss = nn::loss(&nn::dropout_subnetwork(params, keep)?, data, kind)?;
    Ok(DropoutResult {
        keep: keep.to_vec(),
        eps_d: (full_loss - subnet_loss).abs(),
        full_loss,
        subnet_loss,
    })
}

/// [`dropout_error`] for many keep sets, sharing one pass over the hidden
/// layer. Each subnetwork is evaluated as the full network with readout
/// `R * mask * N / |keep|`, which is the same function.
pub fn dropout_errors(
    params: &ModelParams,
    keeps: &[Vec<usize>],
    data: &Dataset,
    kind: LossKind,
) -> Result<Vec<DropoutResult>> {
    let arch = *params.arch();
    let n = arch.hidden;
    let c = arch.output_dim;
    for k in keeps {
        nn::validate_keep_set(n, k)?;
    }
    let full_loss = nn::loss(params, data, kind)?;
    if keeps.is_empty() {
        return Ok(Vec::new());
    }
    let mut stacked = Array2::<f64>::zeros((keeps.len() * c, n));
    for (j, k) in keeps.iter().enumerate() {
        let factor = n as f64 / k.len() as f64;
        for &i in k {
            for r in 0..c {
                stacked[[j * c + r, i]] = params.readout()[[r, i]] * factor;
            }
        }
    }
    let chunk = nn::EVAL_CHUNK;
    let starts: Vec<usize> = (0..data.len()).step_by(chunk).collect();
    let sums = starts
        .par_iter()
        .map(|&start| {
            let end = (start + chunk).min(data.len());
            let x = data.features().slice(s![start..end, ..]);
            let h = nn::hidden_activations(params, x);
            let f = nn::outputs_from_hidden(h.view(), stacked.view(), &arch);
            (0..keeps.len())
                .map(|j| {
                    nn::sample_terms(kind, f.slice(s![.., j * c..(j + 1) * c]), data, start, None)
                        .loss_sum
                })
                .collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>();
    let mut totals = vec![0.0; keeps.len()];
    for part in &sums {
        for (t, v) in totals.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(keeps
        .iter()
        .zip(totals)
        .map(|(k, total)| {
            let subnet_loss = total / data.len() as f64;
            DropoutResult {
                keep: k.clone(),
                eps_d: (full_loss - subnet_loss).abs(),
                full_loss,
                subnet_loss,
            }
        })
        .collect())
}

/// Waypoints `theta, theta_1, ..., theta_6, theta'` of a seven-segment path.
///
/// Neuron `i` is treated as the pair (readout column, hidden row). With
/// `h = floor(N/2)` and kept set `A = {0..h}`, the complementary block
/// `B = {h..2h}` receives the first `h` neurons of `theta'` while switched
/// off, the readout weight moves from `A` to `B` at factor `N/h`, `A` is
/// overwritten with the same neurons, the weight moves back, and `B` is
/// overwritten with the rest of `theta'`. For odd `N` the last neuron is
/// switched off from `theta_1` to `theta_6`.
///
/// Along each segment either only switched-off rows move (constant
/// function) or only readout weights move (output affine in the segment
/// parameter), so for a loss convex in the output the path never exceeds
/// the worst of the two endpoints and their `A`-subnetworks.
pub fn seven_segment_path(theta: &ModelParams, theta_p: &ModelParams) -> Result<Vec<ModelParams>> {
    theta.check_compatible(theta_p)?;
    let arch = *theta.arch();
    let n = arch.hidden;
    if n < 2 {
        return Err(FlmcError::domain(
            "seven-segment path needs at least 2 neurons",
        ));
    }
    let h = n / 2;
    let up = n as f64 / h as f64;
    let a_block = 0..h;
    let b_block = h..2 * h;

    // factors per neuron, applied to the readout column of whichever neuron sits there
    let build = |rows: &Array2<f64>, cols: &Array2<f64>, factors: &[f64]| -> Result<ModelParams> {
        let mut readout = cols.clone();
        for (i, &f) in factors.iter().enumerate() {
            readout.column_mut(i).mapv_inplace(|v| v * f);
        }
        ModelParams::new(arch, rows.clone(), readout)
    };
    let on_a: Vec<f64> = (0..n)
        .map(|i| if a_block.contains(&i) { up } else { 0.0 })
        .collect();
    let on_b: Vec<f64> = (0..n)
        .map(|i| if b_block.contains(&i) { up } else { 0.0 })
        .collect();

    let (th, tr) = (theta.hidden(), theta.readout());
    let (ph, pr) = (theta_p.hidden(), theta_p.readout());

    // rows and columns after B (and the odd spare) take theta'_{0..h}
    let mut rows2 = th.clone();
    let mut cols2 = tr.clone();
    for (j, i) in b_block.clone().enumerate() {
        rows2.row_mut(i).assign(&ph.row(j));
        cols2.column_mut(i).assign(&pr.column(j));
    }
    if n % 2 == 1 {
        rows2.row_mut(n - 1).assign(&ph.row(n - 1));
        cols2.column_mut(n - 1).assign(&pr.column(n - 1));
    }
    let mut rows4 = rows2.clone();
    let mut cols4 = cols2.clone();
    for i in a_block.clone() {
        rows4.row_mut(i).assign(&ph.row(i));
        cols4.column_mut(i).assign(&pr.column(i));
    }
    Ok(vec![
        theta.clone(),
        build(th, tr, &on_a)?,
        build(&rows2, &cols2, &on_a)?,
        build(&rows2, &cols2, &on_b)?,
        build(&rows4, &cols4, &on_b)?,
        build(&rows4, &cols4, &on_a)?,
        build(ph, pr, &on_a)?,
        theta_p.clone(),
    ])
}

/// The kept set of [`seven_segment_path`]: the first `floor(N/2)` neurons.
pub fn seven_segment_keep(n: usize) -> Vec<usize> {
    (0..n / 2).collect()
}

/// Losses along consecutive linear segments through `waypoints`, with
/// `per_segment` points on each segment (shared endpoints counted once).
/// Returns `(segment + t, loss, accuracy)` triples.
pub fn profile_waypoints(
    waypoints: &[ModelParams],
    data: &Dataset,
    kind: LossKind,
    per_segment: usize,
) -> Result<Vec<PathSample>> {
    if waypoints.len() < 2 {
        return Err(FlmcError::domain("need at least two waypoints"));
    }
    let ts = unit_grid(per_segment)?;
    let mut jobs = Vec::new();
    for s in 0..waypoints.len() - 1 {
        let skip_first = usize::from(s > 0);
        for &t in &ts[skip_first..] {
            jobs.push((s, t));
        }
    }
    jobs.par_iter()
        .map(|&(s, t)| {
            let p = lerp(&waypoints[s], &waypoints[s + 1], t)?;
            let e = nn::evaluate(&p, data, kind)?;
            Ok(PathSample {
                nu: s as f64 + t,
                loss: e.loss,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

/// Fraction of samples on which the two networks predict different
/// classes. Predictions are argmax with ties to the lowest class, or the
/// rounded output for scalar networks.
pub fn function_dissimilarity(a: &ModelParams, b: &ModelParams, data: &Dataset) -> Result<f64> {
    if a.arch().output_dim != b.arch().output_dim {
        return Err(FlmcError::shape(
            "networks have different output dimensions",
        ));
    }
    if data.is_empty() {
        return Err(FlmcError::domain("dissimilarity needs a nonempty dataset"));
    }
    let predict = |p: &ModelParams, x| -> Result<Vec<i64>> {
        let f = nn::forward_batch_canonical(p, x)?;
        Ok(f.rows()
            .into_iter()
            .map(|r| {
                if r.len() == 1 {
                    r[0].round() as i64
                } else {
                    nn::argmax(r) as i64
                }
            })
            .collect())
    };
    let mut differ = 0usize;
    for start in (0..data.len()).step_by(nn::EVAL_CHUNK) {
        let end = (start + nn::EVAL_CHUNK).min(data.len());
        let x = data.features().slice(s![start..end, ..]);
        let (pa, pb) = rayon::join(|| predict(a, x), || predict(b, x));
        differ += pa?.iter().zip(pb?.iter()).filter(|(u, v)| u != v).count();
    }
    Ok(differ as f64 / data.len() as f64)
}

/// `||a - b|| / ||reference||` over all parameters.
pub fn weight_distance(a: &ModelParams, b: &ModelParams, reference: &ModelParams) -> Result<f64> {
    a.check_compatible(reference)?;
    let r = reference.norm();
    if r == 0.0 {
        return Err(FlmcError::domain("reference model has zero norm"));
    }
    Ok(a.distance(b)? / r)
}
