//! Experiment configuration documents.
//!
//! One JSON document describes one experiment: the data source, the
//! network, the federated schedule, the heterogeneity levels to train
//! under and the analyses to run on the resulting models. Unknown keys are
//! rejected and every value is checked before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectivity::{BendInit, CurveFindConfig, BARRIER_GRID, SEGMENT_GRID};
use crate::data::Heterogeneity;
use crate::error::{FlmcError, Result};
use crate::fed::LrSchedule;
use crate::landscape::AxisRange;
use crate::nn::{LossKind, Scaling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelSpec,
    pub fed: FedSpec,
    /// Heterogeneity levels; one federated run per entry, all from the
    /// same initial model.
    pub alphas: Vec<Heterogeneity>,
    #[serde(default)]
    pub analyses: Analyses,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `max_train` training samples.
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
    Synthetic {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: usize,
    pub scaling: Scaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSpec {
    pub clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    pub loss: LossKind,
    #[serde(default)]
    pub checkpoint_rounds: Vec<usize>,
    #[serde(default)]
    pub eval_max_samples: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default)]
    pub landscape: Option<LandscapeSpec>,
    #[serde(default)]
    pub barrier: Option<BarrierSpec>,
    #[serde(default)]
    pub curve: Option<CurveSpec>,
    #[serde(default)]
    pub dropout: Option<DropoutSpec>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub compare: bool,
    #[serde(default)]
    pub seven_path: Option<SevenPathSpec>,
    #[serde(default)]
    pub trajectory: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub a_range: AxisRange,
    #[serde(default)]
    pub b_range: AxisRange,
    /// The two client models spanning the plane.
    #[serde(default = "default_clients")]
    pub clients: [usize; 2],
}

fn default_resolution() -> usize {
    25
}

fn default_clients() -> [usize; 2] {
    [0, 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    #[serde(default = "default_barrier_grid")]
    pub grid: usize,
    /// Also sweep the barrier between the first level and every other
    /// level at every round.
    #[serde(default)]
    pub per_round: bool,
    #[serde(default = "default_per_round_grid")]
    pub per_round_grid: usize,
}

fn default_barrier_grid() -> usize {
    BARRIER_GRID
}

fn default_per_round_grid() -> usize {
    11
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_bend_init")]
    pub bend_init: BendInit,
    #[serde(default)]
    pub init_noise: f64,
    #[serde(default = "default_one")]
    pub nu_per_step: usize,
    #[serde(default)]
    pub lr_decay: f64,
    #[serde(default = "default_barrier_grid")]
    pub grid: usize,
}

fn default_bend_init() -> BendInit {
    BendInit::Midpoint
}

fn default_one() -> usize {
    1
}

impl CurveSpec {
    pub fn to_config(&self, seed: u64) -> CurveFindConfig {
        CurveFindConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            bend_init: self.bend_init,
            init_noise: self.init_noise,
            nu_per_step: self.nu_per_step,
            lr_decay: self.lr_decay,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    #[serde(default = "default_keep_fracs")]
    pub keep_fracs: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_keep_fracs() -> Vec<f64> {
    vec![0.5]
}

fn default_trials() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub rounds: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SevenPathSpec {
    #[serde(default = "default_segment_grid")]
    pub per_segment: usize,
}

fn default_segment_grid() -> usize {
    SEGMENT_GRID
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(FlmcError::config(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Idx {
                max_train,
                max_test,
                ..
            } => {
                if *max_train == Some(0) || *max_test == Some(0) {
                    return Err(FlmcError::config(
                        "data.max_train",
                        "sample caps must be positive",
                    ));
                }
            }
            DataSource::Synthetic {
                num_classes,
                per_class,
                test_per_class,
                dim,
                spread,
            } => {
                positive("data.num_classes", *num_classes)?;
                positive("data.per_class", *per_class)?;
                positive("data.test_per_class", *test_per_class)?;
                positive("data.dim", *dim)?;
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(FlmcError::config(
                        "data.spread",
                        "must be finite and non-negative",
                    ));
                }
            }
        }
        positive("model.hidden", self.model.hidden)?;
        let f = &self.fed;
        positive("fed.clients", f.clients)?;
        positive("fed.rounds", f.rounds)?;
        positive("fed.local_iters", f.local_iters)?;
        positive("fed.batch_size", f.batch_size)?;
        if !(0.0..1.0).contains(&f.momentum) {
            return Err(FlmcError::config("fed.momentum", "must lie in [0, 1)"));
        }
        if f.checkpoint_rounds.iter().any(|&r| r > f.rounds) {
            return Err(FlmcError::config(
                "fed.checkpoint_rounds",
                "round beyond fed.rounds",
            ));
        }
        if self.alphas.is_empty() {
            return Err(FlmcError::config(
                "alphas",
                "needs at least one heterogeneity level",
            ));
        }
        for a in &self.alphas {
            a.validate()
                .map_err(|e| FlmcError::config("alphas", e.to_string()))?;
        }
        let a = &self.analyses;
        if let Some(l) = &a.landscape {
            if l.resolution < 2 {
                return Err(FlmcError::config(
                    "analyses.landscape.resolution",
                    "must be at least 2",
                ));
            }
            if l.clients.iter().any(|&c| c >= f.clients) {
                return Err(FlmcError::config(
                    "analyses.landscape.clients",
                    "client index out of range",
                ));
            }
        }
        if let Some(b) = &a.barrier {
            if b.grid < 2 || b.per_round_grid < 2 {
                return Err(FlmcError::config(
                    "analyses.barrier.grid",
                    "must be at least 2",
                ));
            }
        }
        if let Some(c) = &a.curve {
            if self.alphas.len() < 2 {
                return Err(FlmcError::config(
                    "analyses.curve",
                    "needs at least two heterogeneity levels",
                ));
            }
            c.to_config(self.seed)
                .validate()
                .map_err(|e| FlmcError::config("analyses.curve", e.to_string()))?;
            if c.grid < 2 {
                return Err(FlmcError::config(
                    "analyses.curve.grid",
                    "must be at least 2",
                ));
            }
        }
        if let Some(d) = &a.dropout {
            positive("analyses.dropout.trials", d.trials)?;
            if d.keep_fracs.is_empty() || d.keep_fracs.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
                return Err(FlmcError::config(
                    "analyses.dropout.keep_fracs",
                    "fractions must lie in (0, 1]",
                ));
            }
        }
        if let Some(n) = &a.noise {
            if n.rounds.is_empty() || n.rounds.iter().any(|&r| r == 0 || r > f.rounds) {
                return Err(FlmcError::config(
                    "analyses.noise.rounds",
                    "rounds must lie in 1..=fed.rounds",
                ));
            }
            if self.model.scaling != Scaling::MeanField {
                return Err(FlmcError::config(
                    "analyses.noise",
                    "noise is defined for mean_field networks",
                ));
            }
        }
        if let Some(s) = &a.seven_path {
            if s.per_segment < 2 {
                return Err(FlmcError::config(
                    "analyses.seven_path.per_segment",
                    "must be at least 2",
                ));
            }
            if self.alphas.len() < 2 {
                return Err(FlmcError::config(
                    "analyses.seven_path",
                    "needs at least two heterogeneity levels",
                ));
            }
            if self.model.hidden < 2 {
                return Err(FlmcError::config(
                    "analyses.seven_path",
                    "needs at least 2 hidden neurons",
                ));
            }
        }
        if a.compare && self.alphas.len() < 2 {
            return Err(FlmcError::config(
                "analyses.compare",
                "needs at least two heterogeneity levels",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
