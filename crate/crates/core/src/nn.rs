//! Dense two-layer ReLU network.
//!
//! A network holds `N` hidden neurons. Neuron `i` owns a hidden row
//! `hidden[i, ..]` (its input weights) and a readout column `readout[.., i]`.
//! The output is
//!
//! ```text
//! f(x) = scale * readout * relu(hidden * x)
//! ```
//!
//! with `scale = 1/N` in [`Scaling::MeanField`] and `scale = 1` in
//! [`Scaling::Plain`]. All arithmetic is `f64`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlmcError, Result};
use crate::rng::{self, Purpose};

/// Rows processed per block when evaluating large datasets.
pub(crate) const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Output multiplied by `1/N`.
    MeanField,
    /// No width normalisation.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error `sum_c (y_c - f_c)^2`, one-hot targets for class labels.
    Mse,
    /// Softmax followed by negative log likelihood.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub scaling: Scaling,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        scaling: Scaling,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(FlmcError::domain(format!(
                "architecture dimensions must be positive, got d={input_dim} N={hidden} C={output_dim}"
            )));
        }
        Ok(Architecture {
            input_dim,
            hidden,
            output_dim,
            scaling,
        })
    }

    /// Factor applied to `readout * relu(hidden * x)`.
    pub fn output_scale(&self) -> f64 {
        match self.scaling {
            Scaling::MeanField => 1.0 / self.hidden as f64,
            Scaling::Plain => 1.0,
        }
    }

    /// A scalar mean-field network keeps its all-ones readout frozen.
    pub fn trains_readout(&self) -> bool {
        !(self.scaling == Scaling::MeanField && self.output_dim == 1)
    }

    /// Multiplier turning a nominal learning rate into the applied step.
    ///
    /// Mean-field networks take per-neuron steps: the gradient of the loss
    /// with respect to one neuron carries a `1/N` factor, which the step
    /// cancels so that neurons move at a width-independent rate.
    pub fn step_scale(&self) -> f64 {
        match self.scaling {
            Scaling::MeanField => self.hidden as f64,
            Scaling::Plain => 1.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.input_dim + self.output_dim * self.hidden
    }

    pub fn with_hidden(&self, hidden: usize) -> Architecture {
        Architecture { hidden, ..*self }
    }
}

/// Parameters of a two-layer network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    hidden: Array2<f64>,
    readout: Array2<f64>,
}

fn first_non_finite<'a>(values: impl Iterator<Item = &'a f64>) -> Option<usize> {
    values
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
}

impl ModelParams {
    pub fn new(arch: Architecture, hidden: Array2<f64>, readout: Array2<f64>) -> Result<Self> {
        if hidden.dim() != (arch.hidden, arch.input_dim) {
            return Err(FlmcError::shape(format!(
                "hidden matrix is {:?}, architecture needs ({}, {})",
                hidden.dim(),
                arch.hidden,
                arch.input_dim
            )));
        }
        if readout.dim() != (arch.output_dim, arch.hidden) {
            return Err(FlmcError::shape(format!(
                "readout matrix is {:?}, architecture needs ({}, {})",
                readout.dim(),
                arch.output_dim,
                arch.hidden
            )));
        }
        if let Some(index) = first_non_finite(hidden.iter()) {
            return Err(FlmcError::NonFinite {
                what: "hidden weight",
                index,
            });
        }
        if let Some(index) = first_non_finite(readout.iter()) {
            return Err(FlmcError::NonFinite {
                what: "readout weight",
                index: arch.hidden * arch.input_dim + index,
            });
        }
        Ok(ModelParams {
            arch,
            hidden,
            readout,
        })
    }

    /// Seeded initialisation.
    ///
    /// Hidden rows are drawn one after another from a single stream with
    /// entries `N(0, 1/d)`, so a narrower network initialised from the same
    /// seed is a prefix of a wider one. Readout columns come from a second
    /// stream: all ones for a scalar mean-field net, `N(0, 1)` for a
    /// mean-field classifier and `N(0, 1/N)` for a plain network.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let (n, d, c) = (arch.hidden, arch.input_dim, arch.output_dim);
        let mut rng = rng::stream(seed, Purpose::InitHidden, 0, 0);
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut hidden = Array2::zeros((n, d));
        for mut row in hidden.rows_mut() {
            for w in row.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }

        let mut readout = Array2::zeros((c, n));
        match (arch.scaling, c) {
            (Scaling::MeanField, 1) => readout.fill(1.0),
            (scaling, _) => {
                let std = match scaling {
                    Scaling::MeanField => 1.0,
                    Scaling::Plain => (1.0 / n as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut rng = rng::stream(seed, Purpose::InitReadout, 0, 0);
                for mut col in readout.columns_mut() {
                    for w in col.iter_mut() {
                        *w = normal.sample(&mut rng);
                    }
                }
            }
        }
        ModelParams {
            arch,
            hidden,
            readout,
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            arch,
            hidden: Array2::zeros((arch.hidden, arch.input_dim)),
            readout: Array2::zeros((arch.output_dim, arch.hidden)),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    pub fn readout(&self) -> &Array2<f64> {
        &self.readout
    }

    pub fn into_parts(self) -> (Architecture, Array2<f64>, Array2<f64>) {
        (self.arch, self.hidden, self.readout)
    }

    /// Hidden entries row-major followed by readout entries row-major.
    pub fn iter_flat(&self) -> impl Iterator<Item = &f64> {
        self.hidden.iter().chain(self.readout.iter())
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(FlmcError::shape(format!(
                "incompatible architectures {:?} and {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.iter_flat().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance over all flattened parameters.
    pub fn distance(&self, other: &ModelParams) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .iter_flat()
            .zip(other.iter_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Reorders neurons: neuron `j` of the result is neuron `perm[j]` of `self`.
    pub fn permute_neurons(&self, perm: &[usize]) -> Result<ModelParams> {
        let n = self.arch.hidden;
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(FlmcError::domain(format!("not a permutation of 0..{n}")));
        }
        let hidden = self.hidden.select(Axis(0), perm);
        let readout = self.readout.select(Axis(1), perm);
        Ok(ModelParams {
            arch: self.arch,
            hidden,
            readout,
        })
    }

    pub(crate) fn from_parts_unchecked(
        arch: Architecture,
        hidden: Array2<f64>,
        readout: Array2<f64>,
    ) -> Self {
        debug_assert_eq!(hidden.dim(), (arch.hidden, arch.input_dim));
        debug_assert_eq!(readout.dim(), (arch.output_dim, arch.hidden));
        ModelParams {
            arch,
            hidden,
            readout,
        }
    }
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub hidden: Array2<f64>,
    pub readout: Array2<f64>,
}

impl Gradient {
    pub fn zeros(arch: &Architecture) -> Self {
        Gradient {
            hidden: Array2::zeros((arch.hidden, arch.input_dim)),
            readout: Array2::zeros((arch.output_dim, arch.hidden)),
        }
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = &f64> {
        self.hidden.iter().chain(self.readout.iter())
    }

    pub fn norm(&self) -> f64 {
        self.iter_flat().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_shape(&self, arch: &Architecture) -> Result<()> {
        if self.hidden.dim() != (arch.hidden, arch.input_dim)
            || self.readout.dim() != (arch.output_dim, arch.hidden)
        {
            return Err(FlmcError::shape(format!(
                "gradient shapes {:?}/{:?} do not match {:?}",
                self.hidden.dim(),
                self.readout.dim(),
                arch
            )));
        }
        Ok(())
    }
}

#[inline]
fn relu(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        0.0
    }
}

fn check_input(params: &ModelParams, dim: usize) -> Result<()> {
    if dim != params.arch.input_dim {
        return Err(FlmcError::shape(format!(
            "input has {dim} features, network expects {}",
            params.arch.input_dim
        )));
    }
    Ok(())
}

/// Sum that does not depend on the order of `terms`: terms are added in
/// increasing magnitude, ties broken by value.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    terms.iter().sum()
}

/// Output of the network on one input.
///
/// The readout sum is taken in a canonical order, so relabelling neurons
/// leaves the result bit-identical.
pub fn forward(params: &ModelParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_input(params, x.len())?;
    let act: Vec<f64> = params
        .hidden
        .rows()
        .into_iter()
        .map(|row| relu(row.dot(&x)))
        .collect();
    let scale = params.arch.output_scale();
    let mut terms = vec![0.0; act.len()];
    let out = params
        .readout
        .rows()
        .into_iter()
        .map(|weights| {
            for ((t, w), h) in terms.iter_mut().zip(weights.iter()).zip(&act) {
                *t = w * h;
            }
            let s = ordered_sum(&mut terms);
            if params.arch.scaling == Scaling::Plain {
                s
            } else {
                s * scale
            }
        })
        .collect();
    Ok(out)
}

/// `relu(X hidden^T)` for a block of inputs.
pub(crate) fn hidden_activations(params: &ModelParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut h = x.dot(&params.hidden.t());
    h.mapv_inplace(relu);
    h
}

/// Network outputs given hidden activations.
pub(crate) fn outputs_from_hidden(
    h: ArrayView2<f64>,
    readout: ArrayView2<f64>,
    arch: &Architecture,
) -> Array2<f64> {
    let mut f = h.dot(&readout.t());
    if arch.scaling == Scaling::MeanField {
        f *= arch.output_scale();
    }
    f
}

/// Outputs for a block of inputs, one row per input.
pub fn forward_batch(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, x.ncols())?;
    let h = hidden_activations(params, x);
    Ok(outputs_from_hidden(
        h.view(),
        params.readout.view(),
        &params.arch,
    ))
}

/// Like [`forward_batch`], but each readout sum is taken in the canonical
/// order of [`forward`], so the result does not depend on neuron labels.
pub fn forward_batch_canonical(params: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, x.ncols())?;
    let h = hidden_activations(params, x);
    let scale = params.arch.output_scale();
    let mut out = Array2::zeros((x.nrows(), params.arch.output_dim));
    let mut terms = vec![0.0; params.arch.hidden];
    for (hb, mut ob) in h.rows().into_iter().zip(out.rows_mut()) {
        for (weights, o) in params.readout.rows().into_iter().zip(ob.iter_mut()) {
            for ((t, w), a) in terms.iter_mut().zip(weights.iter()).zip(hb.iter()) {
                *t = w * a;
            }
            let s = ordered_sum(&mut terms);
            *o = if params.arch.scaling == Scaling::Plain {
                s
            } else {
                s * scale
            };
        }
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and accuracy of a model on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Per-sample loss, the gradient of that loss with respect to the outputs,
/// and whether the prediction counts as correct.
pub(crate) struct SampleTerms {
    pub loss_sum: f64,
    pub correct: usize,
}

/// Residual `-dl/df` for one sample, halved for MSE so that it reads `y - f`.
pub(crate) fn residual_row(
    kind: LossKind,
    f: ArrayView1<f64>,
    data: &Dataset,
    row: usize,
    out: &mut [f64],
) {
    match kind {
        LossKind::Mse => {
            for (c, o) in out.iter_mut().enumerate() {
                *o = data.target(row, c) - f[c];
            }
        }
        LossKind::CrossEntropy => {
            let probs = softmax(f);
            let label = data.labels()[row];
            for (c, o) in out.iter_mut().enumerate() {
                *o = if c == label { 1.0 } else { 0.0 } - probs[c];
            }
        }
    }
}

fn log_sum_exp(f: ArrayView1<f64>) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(f: ArrayView1<f64>) -> Vec<f64> {
    let lse = log_sum_exp(f);
    f.iter().map(|v| (v - lse).exp()).collect()
}

fn sample_correct(f: ArrayView1<f64>, data: &Dataset, row: usize) -> bool {
    if f.len() == 1 {
        (f[0] - data.target(row, 0)).abs() < 0.5
    } else {
        argmax(f) == data.labels()[row]
    }
}

/// Accumulates loss and accuracy terms for the rows `offset..offset+f.nrows()`.
/// When `dloss` is given it receives `dl/df` scaled by `inv_n`.
pub(crate) fn sample_terms(
    kind: LossKind,
    f: ArrayView2<f64>,
    data: &Dataset,
    offset: usize,
    mut dloss: Option<(&mut Array2<f64>, f64)>,
) -> SampleTerms {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (r, fr) in f.rows().into_iter().enumerate() {
        let row = offset + r;
        let l = match kind {
            LossKind::Mse => {
                let mut l = 0.0;
                for (c, &fc) in fr.iter().enumerate() {
                    let e = fc - data.target(row, c);
                    l += e * e;
                    if let Some((g, inv_n)) = dloss.as_mut() {
                        g[[r, c]] = 2.0 * e * *inv_n;
                    }
                }
                l
            }
            LossKind::CrossEntropy => {
                let label = data.labels()[row];
                let lse = log_sum_exp(fr);
                if let Some((g, inv_n)) = dloss.as_mut() {
                    for (c, &fc) in fr.iter().enumerate() {
                        let p = (fc - lse).exp();
                        let t = if c == label { 1.0 } else { 0.0 };
                        g[[r, c]] = (p - t) * *inv_n;
                    }
                }
                lse - fr[label]
            }
        };
        loss_sum += l;
        if sample_correct(fr, data, row) {
            correct += 1;
        }
    }
    SampleTerms { loss_sum, correct }
}

fn check_data(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<()> {
    if data.is_empty() {
        return Err(FlmcError::domain(format!(
            "dataset `{}` is empty",
            data.name()
        )));
    }
    check_input(params, data.dim())?;
    data.check_outputs(params.arch.output_dim, kind)
}

/// Mean loss and accuracy, evaluated block by block in sample order.
pub fn evaluate(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<Evaluation> {
    check_data(params, data, kind)?;
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = data.features().slice(s![start..end, ..]);
        let h = hidden_activations(params, x);
        let f = outputs_from_hidden(h.view(), params.readout.view(), &params.arch);
        let t = sample_terms(kind, f.view(), data, start, None);
        loss_sum += t.loss_sum;
        correct += t.correct;
        start = end;
    }
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        samples: n,
    })
}

/// Mean per-sample loss.
pub fn loss(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<f64> {
    evaluate(params, data, kind).map(|e| e.loss)
}

/// Exact gradient of [`loss`] by backpropagation. The ReLU derivative at 0 is 0.
pub fn grad(params: &ModelParams, batch: &Dataset, kind: LossKind) -> Result<Gradient> {
    check_data(params, batch, kind)?;
    let arch = params.arch;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let scale = arch.output_scale();
    let mut g = Gradient::zeros(&arch);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = batch.features().slice(s![start..end, ..]);
        let h = hidden_activations(params, x);
        let f = outputs_from_hidden(h.view(), params.readout.view(), &arch);
        let mut df = Array2::zeros(f.dim());
        sample_terms(kind, f.view(), batch, start, Some((&mut df, inv_n)));
        if arch.scaling == Scaling::MeanField {
            df *= scale;
        }
        // readout: dF^T H ; hidden: ((dF R) * 1{H > 0})^T X
        g.readout += &df.t().dot(&h);
        let mut dz = df.dot(&params.readout);
        Zip::from(&mut dz).and(&h).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        g.hidden += &dz.t().dot(&x);
        start = end;
    }
    Ok(g)
}

/// In-place momentum step: `v <- momentum * v + g`, `params <- params - lr * v`.
pub(crate) fn apply_momentum_step(
    params: &mut ModelParams,
    velocity: &mut Gradient,
    mut g: Gradient,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !params.arch.trains_readout() {
        g.readout.fill(0.0);
    }
    if let Some(index) = first_non_finite(g.iter_flat()) {
        return Err(FlmcError::NonFinite {
            what: "gradient entry",
            index,
        });
    }
    if momentum == 0.0 {
        velocity.hidden.assign(&g.hidden);
        velocity.readout.assign(&g.readout);
    } else {
        Zip::from(&mut velocity.hidden)
            .and(&g.hidden)
            .for_each(|v, &gi| *v = momentum * *v + gi);
        Zip::from(&mut velocity.readout)
            .and(&g.readout)
            .for_each(|v, &gi| *v = momentum * *v + gi);
    }
    Zip::from(&mut params.hidden)
        .and(&velocity.hidden)
        .for_each(|p, &v| *p -= lr * v);
    Zip::from(&mut params.readout)
        .and(&velocity.readout)
        .for_each(|p, &v| *p -= lr * v);
    Ok(())
}

fn check_step_args(lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(FlmcError::domain(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(FlmcError::domain(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

/// One SGD-with-momentum step on `batch`. Returns the new parameters and
/// velocity. A frozen readout (scalar mean-field nets) receives no update.
pub fn sgd_step(
    params: &ModelParams,
    batch: &Dataset,
    kind: LossKind,
    lr: f64,
    momentum: f64,
    state: &Gradient,
) -> Result<(ModelParams, Gradient)> {
    check_step_args(lr, momentum)?;
    state.check_shape(&params.arch)?;
    let g = grad(params, batch, kind)?;
    let mut next = params.clone();
    let mut velocity = state.clone();
    apply_momentum_step(&mut next, &mut velocity, g, lr, momentum)?;
    Ok((next, velocity))
}

pub(crate) fn validate_keep_set(n: usize, keep: &[usize]) -> Result<()> {
    if keep.is_empty() {
        return Err(FlmcError::domain("dropout keep set is empty"));
    }
    let mut seen = vec![false; n];
    for &i in keep {
        if i >= n {
            return Err(FlmcError::domain(format!(
                "neuron index {i} out of range for N={n}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(FlmcError::domain(format!(
                "neuron index {i} repeated in keep set"
            )));
        }
    }
    Ok(())
}

/// Network made of the neurons in `keep`.
///
/// A mean-field subnetwork uses its own `1/|keep|` factor. A plain
/// subnetwork rescales the kept readout columns by `N/|keep|`.
pub fn dropout_subnetwork(params: &ModelParams, keep: &[usize]) -> Result<ModelParams> {
    let n = params.arch.hidden;
    validate_keep_set(n, keep)?;
    let arch = params.arch.with_hidden(keep.len());
    let hidden = params.hidden.select(Axis(0), keep);
    let mut readout = params.readout.select(Axis(1), keep);
    if arch.scaling == Scaling::Plain {
        readout *= n as f64 / keep.len() as f64;
    }
    Ok(ModelParams {
        arch,
        hidden,
        readout,
    })
}

/// `sum_j c_j p_j`, accumulated in the order given.
pub fn linear_combination(terms: &[(f64, &ModelParams)]) -> Result<ModelParams> {
    let (&(c0, first), rest) = terms
        .split_first()
        .ok_or_else(|| FlmcError::domain("linear combination of no models"))?;
    let mut hidden = first.hidden.mapv(|v| c0 * v);
    let mut readout = first.readout.mapv(|v| c0 * v);
    for &(c, p) in rest {
        first.check_compatible(p)?;
        Zip::from(&mut hidden)
            .and(&p.hidden)
            .for_each(|a, &v| *a += c * v);
        Zip::from(&mut readout)
            .and(&p.readout)
            .for_each(|a, &v| *a += c * v);
    }
    Ok(ModelParams {
        arch: first.arch,
        hidden,
        readout,
    })
}

/// Entrywise `(1 - a) p + a q`.
pub fn interpolate(p: &ModelParams, q: &ModelParams, a: f64) -> Result<ModelParams> {
    p.check_compatible(q)?;
    let b = 1.0 - a;
    let hidden = Zip::from(&p.hidden)
        .and(&q.hidden)
        .map_collect(|&x, &y| b * x + a * y);
    let readout = Zip::from(&p.readout)
        .and(&q.readout)
        .map_collect(|&x, &y| b * x + a * y);
    Ok(ModelParams {
        arch: p.arch,
        hidden,
        readout,
    })
}

/// Gradient of `relu(<x, theta_i>)` with respect to `theta_i`:
/// `x` when the neuron is active, zero otherwise. `neuron` is zero-based.
pub fn neuron_activation_grad(
    params: &ModelParams,
    x: ArrayView1<f64>,
    neuron: usize,
) -> Result<Array1<f64>> {
    check_input(params, x.len())?;
    if neuron >= params.arch.hidden {
        return Err(FlmcError::domain(format!(
            "neuron {neuron} out of range for N={}",
            params.arch.hidden
        )));
    }
    if params.hidden.row(neuron).dot(&x) > 0.0 {
        Ok(x.to_owned())
    } else {
        Ok(Array1::zeros(x.len()))
    }
}
