//! Federated averaging with per-neuron heterogeneity-noise instrumentation.
//!
//! Every round broadcasts the global model, runs `local_iters` SGD steps on
//! each client shard and averages the client models with weights `n_k / n`.
//! Clients draw their mini-batches from a private stream keyed by
//! `(seed, round, client)`, so a round gives the same result whether clients
//! run in parallel or one after another.

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{FlmcError, Result};
use crate::nn::{self, Gradient, LossKind, ModelParams};
use crate::rng::{self, Purpose};

/// Learning rate per round: a constant or a table indexed by round
/// (1-based; the last entry repeats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl LrSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::PerRound(table) => {
                let i = round.saturating_sub(1).min(table.len().saturating_sub(1));
                table.get(i).copied().unwrap_or(0.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        match self {
            LrSchedule::Constant(v) if ok(*v) => Ok(()),
            LrSchedule::PerRound(t) if !t.is_empty() && t.iter().all(|&v| ok(v)) => Ok(()),
            _ => Err(FlmcError::config(
                "lr",
                "learning rates must be finite and non-negative",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Rounds whose global model is kept; 0 is the initial model.
    #[serde(default)]
    pub checkpoint_rounds: Vec<usize>,
    /// Rounds in which clients step in lockstep and noise is recorded.
    #[serde(default)]
    pub noise_rounds: Vec<usize>,
    /// Cap on samples used for round-log losses; `None` evaluates everything.
    #[serde(default)]
    pub eval_max_samples: Option<usize>,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(FlmcError::config("rounds", "must be at least 1"));
        }
        if self.local_iters == 0 {
            return Err(FlmcError::config("local_iters", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FlmcError::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FlmcError::config("momentum", "must lie in [0, 1)"));
        }
        if let Some(&r) = self.checkpoint_rounds.iter().find(|&&r| r > self.rounds) {
            return Err(FlmcError::config(
                "checkpoint_rounds",
                format!("round {r} exceeds rounds"),
            ));
        }
        if let Some(&r) = self
            .noise_rounds
            .iter()
            .find(|&&r| r == 0 || r > self.rounds)
        {
            return Err(FlmcError::config(
                "noise_rounds",
                format!("round {r} outside 1..=rounds"),
            ));
        }
        if self.eval_max_samples == Some(0) {
            return Err(FlmcError::config("eval_max_samples", "must be positive"));
        }
        self.lr.validate()
    }
}

/// Metrics recorded after aggregation in round `round` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Loss of each client's final local model on its own shard.
    pub client_losses: Vec<f64>,
    /// Symmetric matrix of L2 distances between client models.
    pub client_distances: Vec<Vec<f64>>,
    /// L2 distance from each client model to the new global model.
    pub client_to_global: Vec<f64>,
}

impl RoundLog {
    pub fn mean_client_distance(&self) -> f64 {
        let k = self.client_distances.len();
        if k < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                sum += self.client_distances[i][j];
            }
        }
        sum / (k * (k - 1) / 2) as f64
    }

    pub fn mean_distance_to_global(&self) -> f64 {
        self.client_to_global.iter().sum::<f64>() / self.client_to_global.len() as f64
    }
}

/// Per-neuron noise norms at one local iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub round: usize,
    pub iter: usize,
    pub norms: Vec<f64>,
    pub drift_norms: Vec<f64>,
    pub bias_norms: Vec<f64>,
}

/// Per-neuron noise vectors, one row per neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDecomposition {
    pub drift: Array2<f64>,
    pub bias: Array2<f64>,
}

fn row_norms(m: &Array2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

impl NoiseDecomposition {
    pub fn total(&self) -> Array2<f64> {
        &self.drift + &self.bias
    }

    pub fn record(&self, round: usize, iter: usize) -> NoiseRecord {
        NoiseRecord {
            round,
            iter,
            norms: row_norms(&self.total()),
            drift_norms: row_norms(&self.drift),
            bias_norms: row_norms(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

/// Weighted average of client models, summed in ascending client order.
pub fn aggregate(clients: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if clients.is_empty() {
        return Err(FlmcError::domain(
            "aggregate needs at least one client model",
        ));
    }
    if clients.len() != weights.len() {
        return Err(FlmcError::shape(format!(
            "{} client models but {} weights",
            clients.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(FlmcError::domain(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    for c in &clients[1..] {
        clients[0].check_compatible(c)?;
    }
    let (arch, hidden, readout) = clients[0].clone().into_parts();
    let w0 = weights[0];
    let mut hidden = hidden.mapv(|v| w0 * v);
    let mut readout = readout.mapv(|v| w0 * v);
    for (c, &w) in clients.iter().zip(weights).skip(1) {
        Zip::from(&mut hidden)
            .and(c.hidden())
            .for_each(|a, &v| *a += w * v);
        Zip::from(&mut readout)
            .and(c.readout())
            .for_each(|a, &v| *a += w * v);
    }
    Ok(ModelParams::from_parts_unchecked(arch, hidden, readout))
}

/// Mini-batch index sampler: without replacement within an epoch,
/// reshuffled from its stream when the remaining samples cannot fill a
/// batch. Indices inside a batch are returned in ascending order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `batch_size` is clamped to `len` with a warning.
    pub fn new(len: usize, batch_size: usize, mut rng: ChaCha8Rng) -> Self {
        let batch_size = if batch_size > len {
            log::warn!("batch size {batch_size} exceeds shard size {len}; clamping");
            len
        } else {
            batch_size
        };
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            batch_size,
            rng,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch.sort_unstable();
        batch
    }
}

/// Stream that drives client `client`'s batches in round `round`.
pub fn client_stream(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    rng::stream(seed, Purpose::ClientRound, round as u64, client as u64)
}

/// Stateful local optimiser for one client within one round.
struct LocalTrainer<'a> {
    shard: &'a Dataset,
    model: ModelParams,
    velocity: Gradient,
    sampler: BatchSampler,
    lr: f64,
    momentum: f64,
    kind: LossKind,
}

impl<'a> LocalTrainer<'a> {
    fn new(
        init: &ModelParams,
        shard: &'a Dataset,
        cfg: &FedConfig,
        lr: f64,
        rng: ChaCha8Rng,
    ) -> Self {
        LocalTrainer {
            shard,
            model: init.clone(),
            velocity: Gradient::zeros(init.arch()),
            sampler: BatchSampler::new(shard.len(), cfg.batch_size, rng),
            lr: lr * init.arch().step_scale(),
            momentum: cfg.momentum,
            kind: cfg.loss,
        }
    }

    fn next_batch(&mut self) -> Result<Dataset> {
        self.shard.subset(&self.sampler.next_batch())
    }

    fn step(&mut self, batch: &Dataset) -> Result<()> {
        let g = nn::grad(&self.model, batch, self.kind)?;
        nn::apply_momentum_step(
            &mut self.model,
            &mut self.velocity,
            g,
            self.lr,
            self.momentum,
        )
    }

    fn run(mut self, iters: usize) -> Result<ModelParams> {
        for _ in 0..iters {
            let batch = self.next_batch()?;
            self.step(&batch)?;
        }
        Ok(self.model)
    }
}

/// `cfg.local_iters` SGD steps from `init` on `shard` at the round-1 rate
/// of `cfg.lr`. Momentum starts from zero. Mean-field networks scale the
/// rate by `N` (see [`nn::Architecture::step_scale`]).
pub fn local_train(
    init: &ModelParams,
    shard: &Dataset,
    cfg: &FedConfig,
    round_rng: ChaCha8Rng,
) -> Result<ModelParams> {
    if shard.is_empty() {
        return Err(FlmcError::domain("client shard is empty"));
    }
    let lr = cfg.lr.at(1);
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(FlmcError::domain(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    LocalTrainer::new(init, shard, cfg, lr, round_rng).run(cfg.local_iters)
}

/// Decomposes the heterogeneity noise of every neuron at one iteration.
///
/// For client `k` with batch `x_k`, model output `ŷ_k = f_{θ_k}(x_k)` and
/// averaged-model output `ȳ_k = f_{θ̄}(x_k)`:
///
/// ```text
/// drift_i = Σ_k w_k mean_x [ J_{i,k}ᵀ r(ŷ_k) - J̄_iᵀ r(ŷ_k) ]
/// bias_i  = Σ_k w_k mean_x [ J̄_iᵀ (r(ŷ_k) - r(ȳ_k)) ]
/// ```
///
/// where `J_{i,k} = a_{i,k} 1{<x, θ_{i,k}> > 0} xᵀ` is the Jacobian of neuron
/// `i`'s contribution `a_i relu(<x, θ_i>)` with respect to its input
/// weights and `r` is the output residual (`y - f` for MSE, `onehot -
/// softmax(f)` for cross-entropy). For a scalar mean-field network with unit
/// readout this is `(y_k - ŷ_k)(∇σ_k - ∇σ̄)` plus `(ȳ_k - ŷ_k)∇σ̄`.
pub fn noise_decompose(
    client_models: &[ModelParams],
    client_batches: &[Dataset],
    weights: &[f64],
    avg_model: &ModelParams,
    kind: LossKind,
) -> Result<NoiseDecomposition> {
    let arch = *avg_model.arch();
    if arch.scaling != nn::Scaling::MeanField {
        return Err(FlmcError::Unsupported(
            "noise decomposition is defined for mean-field networks".into(),
        ));
    }
    if client_models.len() != client_batches.len() || client_models.len() != weights.len() {
        return Err(FlmcError::shape(format!(
            "{} models, {} batches, {} weights",
            client_models.len(),
            client_batches.len(),
            weights.len()
        )));
    }
    for m in client_models {
        avg_model.check_compatible(m)?;
    }
    let c = arch.output_dim;
    let mut drift = Array2::<f64>::zeros((arch.hidden, arch.input_dim));
    let mut bias = Array2::<f64>::zeros((arch.hidden, arch.input_dim));
    for ((model, batch), &w) in client_models.iter().zip(client_batches).zip(weights) {
        if batch.is_empty() {
            return Err(FlmcError::domain("empty client batch"));
        }
        if batch.dim() != arch.input_dim {
            return Err(FlmcError::shape(
                "batch feature dimension does not match the network",
            ));
        }
        batch.check_outputs(c, kind)?;
        let x = batch.features().view();
        let h_client = nn::hidden_activations(model, x);
        let h_avg = nn::hidden_activations(avg_model, x);
        let f_client = nn::outputs_from_hidden(h_client.view(), model.readout().view(), &arch);
        let f_avg = nn::outputs_from_hidden(h_avg.view(), avg_model.readout().view(), &arch);

        let b = batch.len();
        let mut r_client = Array2::<f64>::zeros((b, c));
        let mut r_avg = Array2::<f64>::zeros((b, c));
        for row in 0..b {
            nn::residual_row(
                kind,
                f_client.row(row),
                batch,
                row,
                r_client.row_mut(row).as_slice_mut().unwrap(),
            );
            nn::residual_row(
                kind,
                f_avg.row(row),
                batch,
                row,
                r_avg.row_mut(row).as_slice_mut().unwrap(),
            );
        }

        // per-sample, per-neuron coefficients multiplying x
        let mut drift_coef = r_client.dot(model.readout());
        let proj_avg = r_client.dot(avg_model.readout());
        let mut bias_coef = (&r_client - &r_avg).dot(avg_model.readout());
        Zip::from(&mut drift_coef)
            .and(&mut bias_coef)
            .and(&h_client)
            .and(&h_avg)
            .and(&proj_avg)
            .for_each(|dc, bc, &hc, &ha, &pa| {
                let active_client = if hc > 0.0 { *dc } else { 0.0 };
                let active_avg = if ha > 0.0 { pa } else { 0.0 };
                *dc = active_client - active_avg;
                if ha <= 0.0 {
                    *bc = 0.0;
                }
            });
        let scale = w / b as f64;
        drift.scaled_add(scale, &drift_coef.t().dot(&x));
        bias.scaled_add(scale, &bias_coef.t().dot(&x));
    }
    Ok(NoiseDecomposition { drift, bias })
}

/// Mean, max and min of `‖n_i‖` over all neurons and recorded iterations.
pub fn noise_stats(records: &[NoiseRecord]) -> Result<NoiseStats> {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for &v in records.iter().flat_map(|r| &r.norms) {
        count += 1;
        sum += v;
        max = max.max(v);
        min = min.min(v);
    }
    if count == 0 {
        return Err(FlmcError::domain("no noise records to summarise"));
    }
    Ok(NoiseStats {
        mean: sum / count as f64,
        max,
        min,
    })
}

/// Everything a federated run produces.
#[derive(Clone, Debug)]
pub struct FedRun {
    pub final_model: ModelParams,
    /// Client models at the end of the last round, before aggregation.
    pub final_client_models: Vec<ModelParams>,
    pub rounds: Vec<RoundLog>,
    pub noise: Vec<NoiseRecord>,
    pub checkpoints: Vec<(usize, ModelParams)>,
}

fn eval_subset(data: &Dataset, cap: Option<usize>, seed: u64, tag: u64) -> Result<Option<Dataset>> {
    match cap {
        Some(m) if m < data.len() => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng::stream(seed, Purpose::EvalSubsample, tag, 0));
            idx.truncate(m);
            idx.sort_unstable();
            Ok(Some(data.subset(&idx)?))
        }
        _ => Ok(None),
    }
}

/// Runs `cfg.rounds` rounds of FedAvg from `global_init`.
///
/// Noise is recorded for local iterations `1..local_iters` of every round in
/// `cfg.noise_rounds`, on the batch each client is about to step on, against
/// the weighted average of the current client models. Iteration 0 is
/// skipped: all clients still equal the broadcast model there.
pub fn run_fedavg(
    global_init: &ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    part: &Partition,
    cfg: &FedConfig,
) -> Result<FedRun> {
    cfg.validate()?;
    part.validate(train.len())?;
    let weights = part.weights();
    let shards: Vec<Dataset> = part
        .client_indices
        .iter()
        .enumerate()
        .map(|(k, idx)| Ok(train.subset(idx)?.with_name(format!("client{k}"))))
        .collect::<Result<_>>()?;

    let train_eval = eval_subset(train, cfg.eval_max_samples, cfg.seed, 0)?;
    let test_eval = match test {
        Some(t) => eval_subset(t, cfg.eval_max_samples, cfg.seed, 1)?,
        None => None,
    };
    let shard_evals: Vec<Option<Dataset>> = shards
        .iter()
        .enumerate()
        .map(|(k, s)| eval_subset(s, cfg.eval_max_samples, cfg.seed, 2 + k as u64))
        .collect::<Result<_>>()?;

    let mut global = global_init.clone();
    let mut checkpoints = Vec::new();
    if cfg.checkpoint_rounds.contains(&0) {
        checkpoints.push((0, global.clone()));
    }
    let mut logs = Vec::with_capacity(cfg.rounds);
    let mut noise = Vec::new();
    let mut client_models = Vec::new();

    for round in 1..=cfg.rounds {
        let lr = cfg.lr.at(round);
        let mut trainers: Vec<LocalTrainer> = shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                LocalTrainer::new(&global, shard, cfg, lr, client_stream(cfg.seed, round, k))
            })
            .collect();

        client_models = if cfg.noise_rounds.contains(&round) {
            for iter in 0..cfg.local_iters {
                let batches: Vec<Dataset> = trainers
                    .iter_mut()
                    .map(|t| t.next_batch())
                    .collect::<Result<_>>()?;
                if iter > 0 {
                    let models: Vec<ModelParams> =
                        trainers.iter().map(|t| t.model.clone()).collect();
                    let avg = aggregate(&models, &weights)?;
                    let dec = noise_decompose(&models, &batches, &weights, &avg, cfg.loss)?;
                    noise.push(dec.record(round, iter));
                }
                trainers
                    .par_iter_mut()
                    .zip(batches.par_iter())
                    .try_for_each(|(t, b)| t.step(b))?;
            }
            trainers.into_iter().map(|t| t.model).collect()
        } else {
            trainers
                .into_par_iter()
                .map(|t| t.run(cfg.local_iters))
                .collect::<Result<Vec<_>>>()?
        };
        global = aggregate(&client_models, &weights)?;

        let train_eval_set = train_eval.as_ref().unwrap_or(train);
        let tr = nn::evaluate(&global, train_eval_set, cfg.loss)?;
        let te = match test {
            Some(t) => Some(nn::evaluate(
                &global,
                test_eval.as_ref().unwrap_or(t),
                cfg.loss,
            )?),
            None => None,
        };
        let client_losses = client_models
            .par_iter()
            .zip(shards.par_iter().zip(shard_evals.par_iter()))
            .map(|(m, (s, e))| nn::loss(m, e.as_ref().unwrap_or(s), cfg.loss))
            .collect::<Result<Vec<_>>>()?;
        let k = client_models.len();
        let mut client_distances = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let d = client_models[i].distance(&client_models[j])?;
                client_distances[i][j] = d;
                client_distances[j][i] = d;
            }
        }
        let client_to_global = client_models
            .iter()
            .map(|m| m.distance(&global))
            .collect::<Result<Vec<_>>>()?;
        log::info!(
            "round {round}: train loss {:.4} acc {:.4}",
            tr.loss,
            tr.accuracy
        );
        logs.push(RoundLog {
            round,
            train_loss: tr.loss,
            test_loss: te.map_or(f64::NAN, |e| e.loss),
            train_acc: tr.accuracy,
            test_acc: te.map_or(f64::NAN, |e| e.accuracy),
            client_losses,
            client_distances,
            client_to_global,
        });
        if cfg.checkpoint_rounds.contains(&round) {
            checkpoints.push((round, global.clone()));
        }
    }

    Ok(FedRun {
        final_model: global,
        final_client_models: client_models,
        rounds: logs,
        noise,
        checkpoints,
    })
}

/// Per-neuron row norms of a matrix, exposed for diagnostics.
pub fn neuron_norms(m: &Array2<f64>) -> Vec<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
}
