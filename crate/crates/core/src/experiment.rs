//! End-to-end experiment pipelines and their file outputs.
//!
//! Output layout of [`run_experiment`]:
//!
//! ```text
//! <out>/manifest.json
//! <out>/summary.json
//! <out>/alpha_<a>/round_log.csv       round, train_loss, test_loss, train_acc, test_acc,
//!                                     mean_client_dist, mean_dist_to_global
//! <out>/alpha_<a>/client_distances.csv round, client_a, client_b, distance
//! <out>/alpha_<a>/noise.csv           round, iter, neuron, norm_total, norm_drift, norm_bias
//! <out>/alpha_<a>/final.flmc, checkpoints/round_<m>.flmc, clients/client_<k>.flmc
//! <out>/barrier.csv                   round_or_pair, B, absolute_barrier, argmax_a
//! <out>/barrier_per_round.csv         same columns, one row per (round, pair)
//! <out>/paths/<kind>_<a>~<b>.csv      nu, dataset, loss, acc
//! <out>/dropout.csv, noise_stats.csv, compare.csv, landscape_alpha_<a>.csv,
//! <out>/seven_path.csv, seven_path.json, trajectory_alpha_<a>.csv, curve/
//! ```
//!
//! Barrier rows are measured on the global test set. Every file is a pure
//! function of the configuration, so re-running with the same seed
//! reproduces every CSV byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{DataSource, DropoutSpec, ExperimentConfig};
use crate::connectivity::{
    self, keep, BarrierResult, DatasetObjective, Path as ModePath, PathSample,
};
use crate::data::{
    dirichlet_partition, load_idx, synth_gaussian, Dataset, Heterogeneity, Partition,
};
use crate::error::{FlmcError, Result};
use crate::fed::{self, FedConfig, FedRun, NoiseRecord};
use crate::landscape::{self, PlaneSpec};
use crate::nn::{self, Architecture, LossKind, ModelParams};

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("FLMC_VERSION");

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<LoadedData> {
    match source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            max_train,
            max_test,
        } => {
            let cap = |d: Dataset, m: &Option<usize>| -> Result<Dataset> {
                match *m {
                    Some(m) if m < d.len() => {
                        let idx: Vec<usize> = (0..m).collect();
                        Ok(d.subset(&idx)?.with_name(d.name().to_string()))
                    }
                    _ => Ok(d),
                }
            };
            let train = cap(load_idx(train_images, train_labels)?, max_train)?.with_name("train");
            let test = cap(load_idx(test_images, test_labels)?, max_test)?.with_name("test");
            Ok(LoadedData { train, test })
        }
        DataSource::Synthetic {
            num_classes,
            per_class,
            test_per_class,
            dim,
            spread,
        } => {
            // one draw so train and test share class means
            let all = synth_gaussian(
                *num_classes,
                per_class + test_per_class,
                *dim,
                *spread,
                seed,
            )?;
            let per = per_class + test_per_class;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for c in 0..*num_classes {
                tr.extend(c * per..c * per + per_class);
                te.extend(c * per + per_class..(c + 1) * per);
            }
            Ok(LoadedData {
                train: all.subset(&tr)?.with_name("train"),
                test: all.subset(&te)?.with_name("test"),
            })
        }
    }
}

pub fn architecture(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Architecture> {
    let classes = data.train.num_classes().max(data.test.num_classes());
    Architecture::new(
        data.train.dim(),
        cfg.model.hidden,
        classes,
        cfg.model.scaling,
    )
}

/// The schedule used for every heterogeneity level of an experiment.
pub fn fed_config(cfg: &ExperimentConfig) -> FedConfig {
    let f = &cfg.fed;
    let mut checkpoints = f.checkpoint_rounds.clone();
    if cfg.analyses.barrier.as_ref().is_some_and(|b| b.per_round) || cfg.analyses.trajectory {
        checkpoints.extend(0..=f.rounds);
    }
    if cfg.analyses.dropout.is_some() && f.rounds >= 2 {
        checkpoints.push(mid_round(f.rounds));
    }
    checkpoints.sort_unstable();
    checkpoints.dedup();
    FedConfig {
        rounds: f.rounds,
        local_iters: f.local_iters,
        batch_size: f.batch_size,
        lr: f.lr.clone(),
        momentum: f.momentum,
        loss: f.loss,
        seed: cfg.seed,
        checkpoint_rounds: checkpoints,
        noise_rounds: cfg
            .analyses
            .noise
            .as_ref()
            .map(|n| n.rounds.clone())
            .unwrap_or_default(),
        eval_max_samples: f.eval_max_samples,
    }
}

/// Round treated as the middle stage of training.
pub fn mid_round(rounds: usize) -> usize {
    rounds / 2
}

fn alpha_dir(out: &Path, alpha: &Heterogeneity) -> PathBuf {
    out.join(format!("alpha_{}", alpha.label()))
}

fn pair_label(a: &Heterogeneity, b: &Heterogeneity) -> String {
    format!("{}~{}", a.label(), b.label())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header-only file when there are no rows, so the schema is
/// always present.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        w.flush()?;
        return Ok(());
    }
    write_csv(path, rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_client_dist: f64,
    pub mean_dist_to_global: f64,
}

pub const ROUND_HEADER: &[&str] = &[
    "round",
    "train_loss",
    "test_loss",
    "train_acc",
    "test_acc",
    "mean_client_dist",
    "mean_dist_to_global",
];

#[derive(Serialize)]
pub struct NoiseRow {
    pub round: usize,
    pub iter: usize,
    pub neuron: usize,
    pub norm_total: f64,
    pub norm_drift: f64,
    pub norm_bias: f64,
}

pub const NOISE_HEADER: &[&str] = &[
    "round",
    "iter",
    "neuron",
    "norm_total",
    "norm_drift",
    "norm_bias",
];

#[derive(Serialize)]
pub struct PathRow {
    pub nu: f64,
    pub dataset: String,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Serialize)]
pub struct BarrierRow {
    pub round_or_pair: String,
    #[serde(rename = "B")]
    pub b: f64,
    pub absolute_barrier: f64,
    pub argmax_a: f64,
}

pub const BARRIER_HEADER: &[&str] = &["round_or_pair", "B", "absolute_barrier", "argmax_a"];

impl BarrierRow {
    pub fn new(label: String, r: &BarrierResult) -> Self {
        BarrierRow {
            round_or_pair: label,
            b: r.b,
            absolute_barrier: r.absolute_barrier,
            argmax_a: r.argmax_a,
        }
    }
}

#[derive(Serialize)]
struct ClientDistanceRow {
    round: usize,
    client_a: String,
    client_b: String,
    distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DropoutRow {
    pub alpha: String,
    pub stage: String,
    pub keep_frac: f64,
    pub trial: usize,
    pub dataset: String,
    pub eps_d: f64,
    pub full_loss: f64,
    pub subnet_loss: f64,
}

#[derive(Serialize)]
pub struct NoiseStatsRow {
    pub alpha: String,
    pub records: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// The same statistics divided by `N`: the noise as it appears in the
    /// gradient of the mean-field loss.
    pub mean_grad_scale: f64,
    pub max_grad_scale: f64,
    pub min_grad_scale: f64,
}

#[derive(Serialize)]
pub struct CompareRow {
    pub alpha_a: String,
    pub alpha_b: String,
    pub dataset: String,
    pub function_dissimilarity: f64,
    pub weight_distance: f64,
    pub dist_a_to_init: f64,
    pub dist_b_to_init: f64,
}

#[derive(Serialize)]
pub struct LandscapeRow {
    pub a: f64,
    pub b: f64,
    pub dataset: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn round_rows(run: &FedRun) -> Vec<RoundRow> {
    run.rounds
        .iter()
        .map(|l| RoundRow {
            round: l.round,
            train_loss: l.train_loss,
            test_loss: l.test_loss,
            train_acc: l.train_acc,
            test_acc: l.test_acc,
            mean_client_dist: l.mean_client_distance(),
            mean_dist_to_global: l.mean_distance_to_global(),
        })
        .collect()
}

pub fn noise_rows(records: &[NoiseRecord]) -> Vec<NoiseRow> {
    records
        .iter()
        .flat_map(|r| {
            (0..r.norms.len()).map(move |i| NoiseRow {
                round: r.round,
                iter: r.iter,
                neuron: i,
                norm_total: r.norms[i],
                norm_drift: r.drift_norms[i],
                norm_bias: r.bias_norms[i],
            })
        })
        .collect()
}

pub fn path_rows(profile: &[PathSample], dataset: &str) -> Vec<PathRow> {
    profile
        .iter()
        .map(|p| PathRow {
            nu: p.nu,
            dataset: dataset.to_string(),
            loss: p.loss,
            acc: p.accuracy,
        })
        .collect()
}

/// Symmetric distance matrix with a label column and a trailing
/// distance-to-reference column.
pub fn write_distance_matrix(path: &Path, t: &landscape::TrajectoryDistances) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend(t.labels.iter().cloned());
    header.push("to_reference".into());
    w.write_record(&header)?;
    for (i, label) in t.labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(t.pairwise.row(i).iter().map(|v| v.to_string()));
        rec.push(t.to_reference[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// ε_D over `spec.trials` random keep sets for each fraction, on each dataset.
pub fn dropout_sweep(
    model: &ModelParams,
    datasets: &[&Dataset],
    kind: LossKind,
    spec: &DropoutSpec,
    seed: u64,
    alpha: &str,
    stage: &str,
) -> Result<Vec<DropoutRow>> {
    let n = model.arch().hidden;
    let mut rows = Vec::new();
    for &frac in &spec.keep_fracs {
        let size = keep::fraction_size(n, frac)?;
        let keeps: Vec<Vec<usize>> = (0..spec.trials)
            .map(|t| keep::random_subset(n, size, seed, t as u64))
            .collect::<Result<_>>()?;
        for d in datasets {
            let res = connectivity::dropout_errors(model, &keeps, d, kind)?;
            rows.extend(res.into_iter().enumerate().map(|(t, r)| DropoutRow {
                alpha: alpha.to_string(),
                stage: stage.to_string(),
                keep_frac: frac,
                trial: t,
                dataset: d.name().to_string(),
                eps_d: r.eps_d,
                full_loss: r.full_loss,
                subnet_loss: r.subnet_loss,
            }));
        }
    }
    Ok(rows)
}

pub fn noise_stats_row(
    alpha: &str,
    records: &[NoiseRecord],
    hidden: usize,
) -> Result<NoiseStatsRow> {
    let s = fed::noise_stats(records)?;
    let n = hidden as f64;
    Ok(NoiseStatsRow {
        alpha: alpha.to_string(),
        records: records.len(),
        mean: s.mean,
        max: s.max,
        min: s.min,
        mean_grad_scale: s.mean / n,
        max_grad_scale: s.max / n,
        min_grad_scale: s.min / n,
    })
}

#[derive(Serialize)]
pub struct SevenPathSummary {
    pub loss: LossKind,
    pub max_path_loss: f64,
    pub max_endpoint_loss: f64,
    pub eps_d_start: f64,
    pub eps_d_end: f64,
    pub bound: f64,
    /// Only meaningful for MSE.
    pub bound_holds: bool,
}

/// Profile of the seven-segment path and the bound
/// `max endpoint loss + max endpoint ε_D` at the path's kept set.
pub fn seven_path_profile(
    a: &ModelParams,
    b: &ModelParams,
    data: &Dataset,
    kind: LossKind,
    per_segment: usize,
) -> Result<(Vec<PathSample>, SevenPathSummary)> {
    let waypoints = connectivity::seven_segment_path(a, b)?;
    let profile = connectivity::profile_waypoints(&waypoints, data, kind, per_segment)?;
    let keep = connectivity::seven_segment_keep(a.arch().hidden);
    let ea = connectivity::dropout_error(a, &keep, data, kind)?;
    let eb = connectivity::dropout_error(b, &keep, data, kind)?;
    let max_path_loss = profile
        .iter()
        .map(|p| p.loss)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_endpoint_loss = ea.full_loss.max(eb.full_loss);
    let bound = max_endpoint_loss + ea.eps_d.max(eb.eps_d);
    Ok((
        profile,
        SevenPathSummary {
            loss: kind,
            max_path_loss,
            max_endpoint_loss,
            eps_d_start: ea.eps_d,
            eps_d_end: eb.eps_d,
            bound,
            bound_holds: max_path_loss <= bound + 1e-9,
        },
    ))
}

/// Outcome of one heterogeneity level.
pub struct AlphaRun {
    pub alpha: Heterogeneity,
    pub partition: Partition,
    pub run: FedRun,
}

impl AlphaRun {
    pub fn checkpoint(&self, round: usize) -> Option<&ModelParams> {
        self.run
            .checkpoints
            .iter()
            .find(|(r, _)| *r == round)
            .map(|(_, p)| p)
    }
}

/// Trains one federated run per heterogeneity level from a shared
/// initialisation and writes the per-level logs and checkpoints.
pub fn train_all(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    init: &ModelParams,
    out: &Path,
) -> Result<Vec<AlphaRun>> {
    let fcfg = fed_config(cfg);
    let mut runs = Vec::new();
    for alpha in &cfg.alphas {
        log::info!("training alpha={alpha}");
        let part = dirichlet_partition(
            data.train.labels(),
            data.train.num_classes(),
            cfg.fed.clients,
            *alpha,
            cfg.seed,
        )?;
        let run = fed::run_fedavg(init, &data.train, Some(&data.test), &part, &fcfg)?;
        let dir = alpha_dir(out, alpha);
        fs::create_dir_all(&dir)?;
        write_csv_with_header(&dir.join("round_log.csv"), ROUND_HEADER, &round_rows(&run))?;
        let mut dist_rows = Vec::new();
        for l in &run.rounds {
            let k = l.client_distances.len();
            for i in 0..k {
                for j in i + 1..k {
                    dist_rows.push(ClientDistanceRow {
                        round: l.round,
                        client_a: i.to_string(),
                        client_b: j.to_string(),
                        distance: l.client_distances[i][j],
                    });
                }
                dist_rows.push(ClientDistanceRow {
                    round: l.round,
                    client_a: i.to_string(),
                    client_b: "global".into(),
                    distance: l.client_to_global[i],
                });
            }
        }
        write_csv(&dir.join("client_distances.csv"), &dist_rows)?;
        if !fcfg.noise_rounds.is_empty() {
            write_csv_with_header(
                &dir.join("noise.csv"),
                NOISE_HEADER,
                &noise_rows(&run.noise),
            )?;
        }
        let meta = |round| CheckpointMeta::new(*init.arch(), cfg.seed, round, Some(*alpha));
        save_checkpoint(
            &run.final_model,
            &meta(cfg.fed.rounds),
            &dir.join("final.flmc"),
        )?;
        fs::create_dir_all(dir.join("checkpoints"))?;
        for (r, p) in &run.checkpoints {
            save_checkpoint(
                p,
                &meta(*r),
                &dir.join("checkpoints").join(format!("round_{r:04}.flmc")),
            )?;
        }
        fs::create_dir_all(dir.join("clients"))?;
        for (k, p) in run.final_client_models.iter().enumerate() {
            let mut m = meta(cfg.fed.rounds);
            m.label = Some(format!("client{k}"));
            save_checkpoint(p, &m, &dir.join("clients").join(format!("client_{k}.flmc")))?;
        }
        runs.push(AlphaRun {
            alpha: *alpha,
            partition: part,
            run,
        });
    }
    Ok(runs)
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a ExperimentConfig,
    notes: Vec<&'static str>,
}

pub fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            version: VERSION,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg,
            notes: vec![
                "noise is recorded at local iterations 1..p of each noise round on the batch every client is about to use, against the weighted average of the current client models",
                "noise norms are per-neuron (no 1/N factor); noise_stats.csv also lists them divided by N",
                "barrier rows use the global test set",
            ],
        },
    )
}

/// One line of the printed summary table.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryLine {
    pub key: String,
    pub value: String,
}

fn line(key: impl Into<String>, value: impl ToString) -> SummaryLine {
    SummaryLine {
        key: key.into(),
        value: value.to_string(),
    }
}

/// Runs training and every requested analysis, writing all artifacts to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryLine>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_manifest(cfg, out)?;
    let data = load_data(&cfg.data, cfg.seed)?;
    let arch = architecture(cfg, &data)?;
    let init = ModelParams::init(arch, cfg.seed);
    let kind = cfg.fed.loss;
    let runs = train_all(cfg, &data, &init, out)?;
    let mut summary = Vec::new();
    for r in &runs {
        let last = r.run.rounds.last().expect("at least one round");
        summary.push(line(
            format!("alpha={} final test acc", r.alpha),
            format!("{:.4}", last.test_acc),
        ));
        summary.push(line(
            format!("alpha={} final train loss", r.alpha),
            format!("{:.4}", last.train_loss),
        ));
    }
    let a = &cfg.analyses;

    if let Some(spec) = &a.barrier {
        let mut rows = Vec::new();
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                let path = ModePath::linear(
                    runs[i].run.final_model.clone(),
                    runs[j].run.final_model.clone(),
                )?;
                let profile = connectivity::traverse(&path, &data.test, kind, spec.grid)?;
                let label = pair_label(&runs[i].alpha, &runs[j].alpha);
                write_csv(
                    &out.join("paths").join(format!("linear_{label}.csv")),
                    &path_rows(&profile, "test"),
                )?;
                let nus: Vec<f64> = profile.iter().map(|p| p.nu).collect();
                let losses: Vec<f64> = profile.iter().map(|p| p.loss).collect();
                let b = connectivity::barrier_from_profile(&nus, &losses)?;
                summary.push(line(
                    format!("barrier {label}"),
                    format!("B={:.4} abs={:.4}", b.b, b.absolute_barrier),
                ));
                rows.push(BarrierRow::new(label, &b));
            }
        }
        write_csv_with_header(&out.join("barrier.csv"), BARRIER_HEADER, &rows)?;
        if spec.per_round {
            let mut rows = Vec::new();
            for other in runs.iter().skip(1) {
                for m in 0..=cfg.fed.rounds {
                    let (Some(p), Some(q)) = (runs[0].checkpoint(m), other.checkpoint(m)) else {
                        continue;
                    };
                    let path = ModePath::linear(p.clone(), q.clone())?;
                    let b = connectivity::barrier(&path, &data.test, kind, spec.per_round_grid)?;
                    rows.push(BarrierRow::new(
                        format!("{m}:{}", pair_label(&runs[0].alpha, &other.alpha)),
                        &b,
                    ));
                }
            }
            write_csv_with_header(&out.join("barrier_per_round.csv"), BARRIER_HEADER, &rows)?;
        }
    }

    if let Some(spec) = &a.curve {
        let (p, q) = (&runs[0].run.final_model, &runs[1].run.final_model);
        let label = pair_label(&runs[0].alpha, &runs[1].alpha);
        let objective = DatasetObjective {
            data: &data.train,
            kind,
        };
        let bend = connectivity::curve_find(p, q, &objective, &spec.to_config(cfg.seed))?;
        fs::create_dir_all(out.join("curve"))?;
        save_checkpoint(
            &bend,
            &CheckpointMeta::new(arch, cfg.seed, cfg.fed.rounds, None),
            &out.join("curve").join("bend.flmc"),
        )?;
        let chain = ModePath::poly_chain(p.clone(), bend, q.clone())?;
        let line_path = ModePath::linear(p.clone(), q.clone())?;
        let mut rows = Vec::new();
        let mut results = Vec::new();
        for (name, path) in [("polychain", &chain), ("linear", &line_path)] {
            for d in [&data.train, &data.test] {
                let profile = connectivity::traverse(path, d, kind, spec.grid)?;
                let nus: Vec<f64> = profile.iter().map(|s| s.nu).collect();
                let losses: Vec<f64> = profile.iter().map(|s| s.loss).collect();
                let b = connectivity::barrier_from_profile(&nus, &losses)?;
                results.push(serde_json::json!({
                    "path": name, "dataset": d.name(), "B": b.b,
                    "absolute_barrier": b.absolute_barrier, "eps_c": b.connectivity_error(),
                }));
                if name == "polychain" {
                    rows.extend(path_rows(&profile, d.name()));
                }
            }
        }
        write_csv(
            &out.join("paths").join(format!("polychain_{label}.csv")),
            &rows,
        )?;
        write_json(&out.join("curve").join("summary.json"), &results)?;
        summary.push(line(
            format!("curve {label}"),
            serde_json::to_string(&results[1])?,
        ));
    }

    if let Some(spec) = &a.dropout {
        let mut rows = Vec::new();
        for r in &runs {
            let label = r.alpha.label();
            let mut stages = vec![("final", &r.run.final_model)];
            if cfg.fed.rounds >= 2 {
                if let Some(m) = r.checkpoint(mid_round(cfg.fed.rounds)) {
                    stages.push(("mid", m));
                }
            }
            for (stage, model) in stages {
                rows.extend(dropout_sweep(
                    model,
                    &[&data.train, &data.test],
                    kind,
                    spec,
                    cfg.seed,
                    &label,
                    stage,
                )?);
            }
            let finals: Vec<f64> = rows
                .iter()
                .filter(|x| x.alpha == label && x.stage == "final" && x.dataset == "train")
                .map(|x| x.eps_d)
                .collect();
            summary.push(line(
                format!("alpha={} mean train eps_D", r.alpha),
                format!("{:.5}", finals.iter().sum::<f64>() / finals.len() as f64),
            ));
        }
        write_csv(&out.join("dropout.csv"), &rows)?;
    }

    if a.noise.is_some() {
        let rows = runs
            .iter()
            .map(|r| noise_stats_row(&r.alpha.label(), &r.run.noise, arch.hidden))
            .collect::<Result<Vec<_>>>()?;
        for r in &rows {
            summary.push(line(
                format!("alpha={} noise mean/max", r.alpha),
                format!("{:.4e}/{:.4e}", r.mean, r.max),
            ));
        }
        write_csv(&out.join("noise_stats.csv"), &rows)?;
    }

    if a.compare {
        let mut rows = Vec::new();
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                let (p, q) = (&runs[i].run.final_model, &runs[j].run.final_model);
                for d in [&data.train, &data.test] {
                    rows.push(CompareRow {
                        alpha_a: runs[i].alpha.label(),
                        alpha_b: runs[j].alpha.label(),
                        dataset: d.name().to_string(),
                        function_dissimilarity: connectivity::function_dissimilarity(p, q, d)?,
                        weight_distance: connectivity::weight_distance(p, q, &init)?,
                        dist_a_to_init: connectivity::weight_distance(p, &init, &init)?,
                        dist_b_to_init: connectivity::weight_distance(q, &init, &init)?,
                    });
                }
            }
        }
        write_csv(&out.join("compare.csv"), &rows)?;
    }

    if let Some(spec) = &a.landscape {
        for r in &runs {
            let clients = &r.run.final_client_models;
            let [k1, k2] = spec.clients;
            let mut plane = PlaneSpec::new(
                r.run.final_model.clone(),
                clients[k1].clone(),
                clients[k2].clone(),
            )?;
            plane.a_range = spec.a_range;
            plane.b_range = spec.b_range;
            plane.resolution = spec.resolution;
            let projected = r.partition.project(
                data.train.labels(),
                data.test.labels(),
                data.train.num_classes(),
            );
            let mut sets = vec![data.test.clone().with_name("global_test")];
            for k in [k1, k2] {
                if !projected[k].is_empty() {
                    sets.push(
                        data.test
                            .subset(&projected[k])?
                            .with_name(format!("client{k}_test")),
                    );
                }
            }
            let refs: Vec<&Dataset> = sets.iter().collect();
            let grids = landscape::hyperplane_grid(&plane, &refs, kind)?;
            let mut rows = Vec::new();
            for g in &grids {
                for (i, &av) in g.a_coords.iter().enumerate() {
                    for (j, &bv) in g.b_coords.iter().enumerate() {
                        rows.push(LandscapeRow {
                            a: av,
                            b: bv,
                            dataset: g.dataset.clone(),
                            loss: g.loss[[i, j]],
                            accuracy: g.accuracy[[i, j]],
                        });
                    }
                }
            }
            write_csv(
                &out.join(format!("landscape_alpha_{}.csv", r.alpha.label())),
                &rows,
            )?;
        }
    }

    if let Some(spec) = &a.seven_path {
        let (p, q) = (&runs[0].run.final_model, &runs[1].run.final_model);
        let (profile, s) = seven_path_profile(p, q, &data.train, kind, spec.per_segment)?;
        write_csv(&out.join("seven_path.csv"), &path_rows(&profile, "train"))?;
        summary.push(line(
            "seven-segment max loss / bound",
            format!("{:.4} / {:.4}", s.max_path_loss, s.bound),
        ));
        write_json(&out.join("seven_path.json"), &s)?;
    }

    if a.trajectory {
        for r in &runs {
            let mut cps: Vec<(String, ModelParams)> = r
                .run
                .checkpoints
                .iter()
                .map(|(m, p)| (format!("global_r{m}"), p.clone()))
                .collect();
            cps.extend(
                r.run
                    .final_client_models
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (format!("client{k}_final"), p.clone())),
            );
            if cps.len() >= 2 {
                let t = landscape::trajectory_distances(&cps, &init)?;
                write_distance_matrix(
                    &out.join(format!("trajectory_alpha_{}.csv", r.alpha.label())),
                    &t,
                )?;
            }
        }
    }

    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Training only: per-level logs and checkpoints, no analyses.
pub fn train_fed(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SummaryLine>> {
    let mut only_training = cfg.clone();
    let noise = cfg.analyses.noise.clone();
    only_training.analyses = Default::default();
    only_training.analyses.noise = noise;
    run_experiment(&only_training, out)
}

/// Rejects checkpoints that cannot be evaluated on `data`.
pub fn check_against_data(params: &ModelParams, data: &Dataset) -> Result<()> {
    let arch = params.arch();
    if arch.input_dim != data.dim() {
        return Err(FlmcError::shape(format!(
            "checkpoint expects {} input features, data has {}",
            arch.input_dim,
            data.dim()
        )));
    }
    if arch.output_dim > 1 && arch.output_dim < data.num_classes() {
        return Err(FlmcError::shape(format!(
            "checkpoint has {} outputs, data has {} classes",
            arch.output_dim,
            data.num_classes()
        )));
    }
    Ok(())
}

/// Loss and accuracy of a model, exposed for the command-line tools.
pub fn evaluate(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<nn::Evaluation> {
    check_against_data(params, data)?;
    nn::evaluate(params, data, kind)
}
