use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flmc::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use flmc::config::{DropoutSpec, ExperimentConfig};
use flmc::connectivity::{self, DatasetObjective, Path as ModePath};
use flmc::data::Dataset;
use flmc::experiment::{self, BarrierRow, CompareRow, LandscapeRow, LoadedData, BARRIER_HEADER};
use flmc::landscape::{self, AxisRange, PlaneSpec};
use flmc::nn::ModelParams;

#[derive(Parser)]
#[command(name = "flmc", version = experiment::VERSION, about = "Federated learning mode-connectivity experiments")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FLMC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train every heterogeneity level and run all configured analyses.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every heterogeneity level, writing logs and checkpoints only.
    TrainFed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss surface on the plane through three checkpoints.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        origin: PathBuf,
        #[arg(long)]
        axis_a: PathBuf,
        #[arg(long)]
        axis_b: PathBuf,
        #[arg(long, default_value_t = 25)]
        resolution: usize,
        #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
        min: f64,
        #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
        max: f64,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss and accuracy along a linear path, or a polygonal chain with --bend.
    Path {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        end: PathBuf,
        #[arg(long)]
        bend: Option<PathBuf>,
        #[arg(long, default_value_t = connectivity::BARRIER_GRID)]
        grid: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimise the bend of a polygonal chain between two checkpoints.
    CurveFind {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        end: PathBuf,
        /// Output checkpoint for the bend.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dropout errors of random subnetworks of one checkpoint.
    Dropout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        keep_frac: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss barrier between two checkpoints, or per round between two run directories.
    Barrier {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "per_round")]
        start: Option<PathBuf>,
        #[arg(long, required_unless_present = "per_round")]
        end: Option<PathBuf>,
        /// Compare `checkpoints/round_*.flmc` of --run-a and --run-b.
        #[arg(long, requires_all = ["run_a", "run_b"])]
        per_round: bool,
        #[arg(long)]
        run_a: Option<PathBuf>,
        #[arg(long)]
        run_b: Option<PathBuf>,
        #[arg(long, default_value_t = connectivity::BARRIER_GRID)]
        grid: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with noise decomposition at the configured rounds.
    Noise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Function dissimilarity and relative weight distance of two checkpoints.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Shared initialisation, used to normalise distances.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss along the seven-segment path between two checkpoints.
    SevenPath {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        start: PathBuf,
        #[arg(long)]
        end: PathBuf,
        #[arg(long, default_value_t = connectivity::SEGMENT_GRID)]
        per_segment: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    experiment::load_data(&cfg.data, cfg.seed).context("loading data")
}

fn pick(data: &LoadedData, split: Split) -> &Dataset {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

fn load_model(path: &Path, data: &LoadedData) -> Result<ModelParams> {
    let (p, _) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    experiment::check_against_data(&p, &data.train)
        .with_context(|| format!("checkpoint {} does not match the data", path.display()))?;
    Ok(p)
}

fn print_summary(lines: &[experiment::SummaryLine]) {
    let width = lines.iter().map(|l| l.key.len()).max().unwrap_or(0);
    for l in lines {
        println!("{:width$}  {}", l.key, l.value);
    }
}

fn round_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir.join("checkpoints"))? {
        let path = entry?.path();
        let round = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("round_"))
            .and_then(|s| s.parse().ok());
        if let Some(r) = round {
            out.push((r, path));
        }
    }
    out.sort();
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, out } => {
            let cfg = load_config(&common)?;
            print_summary(&experiment::run_experiment(&cfg, &out)?);
        }
        Command::TrainFed { common, out } => {
            let cfg = load_config(&common)?;
            print_summary(&experiment::train_fed(&cfg, &out)?);
        }
        Command::Noise { common, out } => {
            let cfg = load_config(&common)?;
            if cfg.analyses.noise.is_none() {
                bail!("config has no analyses.noise section");
            }
            print_summary(&experiment::train_fed(&cfg, &out)?);
        }
        Command::Landscape {
            common,
            origin,
            axis_a,
            axis_b,
            resolution,
            min,
            max,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let mut spec = PlaneSpec::new(
                load_model(&origin, &data)?,
                load_model(&axis_a, &data)?,
                load_model(&axis_b, &data)?,
            )?;
            spec.resolution = resolution;
            spec.a_range = AxisRange { min, max };
            spec.b_range = spec.a_range;
            let grids = landscape::hyperplane_grid(&spec, &[pick(&data, split)], cfg.fed.loss)?;
            let g = &grids[0];
            let mut rows = Vec::new();
            for (i, &a) in g.a_coords.iter().enumerate() {
                for (j, &b) in g.b_coords.iter().enumerate() {
                    rows.push(LandscapeRow {
                        a,
                        b,
                        dataset: g.dataset.clone(),
                        loss: g.loss[[i, j]],
                        accuracy: g.accuracy[[i, j]],
                    });
                }
            }
            experiment::write_csv(&out, &rows)?;
        }
        Command::Path {
            common,
            start,
            end,
            bend,
            grid,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let (p, q) = (load_model(&start, &data)?, load_model(&end, &data)?);
            let path = match bend {
                Some(b) => ModePath::poly_chain(p, load_model(&b, &data)?, q)?,
                None => ModePath::linear(p, q)?,
            };
            let d = pick(&data, split);
            let profile = connectivity::traverse(&path, d, cfg.fed.loss, grid)?;
            experiment::write_csv(&out, &experiment::path_rows(&profile, d.name()))?;
            let nus: Vec<f64> = profile.iter().map(|s| s.nu).collect();
            let losses: Vec<f64> = profile.iter().map(|s| s.loss).collect();
            let b = connectivity::barrier_from_profile(&nus, &losses)?;
            println!(
                "{} path: B={:.6} absolute={:.6}",
                path.kind_name(),
                b.b,
                b.absolute_barrier
            );
        }
        Command::CurveFind {
            common,
            start,
            end,
            out,
        } => {
            let cfg = load_config(&common)?;
            let spec = cfg
                .analyses
                .curve
                .as_ref()
                .context("config has no analyses.curve section")?;
            let data = load_data(&cfg)?;
            let (p, q) = (load_model(&start, &data)?, load_model(&end, &data)?);
            let objective = DatasetObjective {
                data: &data.train,
                kind: cfg.fed.loss,
            };
            let bend = connectivity::curve_find(&p, &q, &objective, &spec.to_config(cfg.seed))?;
            let mut meta = CheckpointMeta::new(*bend.arch(), cfg.seed, 0, None);
            meta.label = Some("bend".into());
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_checkpoint(&bend, &meta, &out)?;
            let chain = ModePath::poly_chain(p, bend, q)?;
            let b = connectivity::barrier(&chain, &data.test, cfg.fed.loss, spec.grid)?;
            println!(
                "polygonal chain test barrier: B={:.6} eps_C={:.6}",
                b.b,
                b.connectivity_error()
            );
        }
        Command::Dropout {
            common,
            checkpoint,
            keep_frac,
            trials,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let model = load_model(&checkpoint, &data)?;
            let rows = experiment::dropout_sweep(
                &model,
                &[&data.train, &data.test],
                cfg.fed.loss,
                &DropoutSpec {
                    keep_fracs: vec![keep_frac],
                    trials,
                },
                cfg.seed,
                "-",
                "checkpoint",
            )?;
            experiment::write_csv(&out, &rows)?;
            for split in ["train", "test"] {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.dataset == split)
                    .map(|r| r.eps_d)
                    .collect();
                println!(
                    "{split} mean eps_D = {:.6}",
                    v.iter().sum::<f64>() / v.len() as f64
                );
            }
        }
        Command::Barrier {
            common,
            start,
            end,
            per_round,
            run_a,
            run_b,
            grid,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let d = pick(&data, split);
            let mut rows = Vec::new();
            if per_round {
                let (ra, rb) = (
                    run_a.expect("clap requires run_a"),
                    run_b.expect("clap requires run_b"),
                );
                let b_rounds = round_checkpoints(&rb)?;
                for (m, pa) in round_checkpoints(&ra)? {
                    let Some((_, pb)) = b_rounds.iter().find(|(r, _)| *r == m) else {
                        continue;
                    };
                    let path = ModePath::linear(load_model(&pa, &data)?, load_model(pb, &data)?)?;
                    let b = connectivity::barrier(&path, d, cfg.fed.loss, grid)?;
                    rows.push(BarrierRow::new(m.to_string(), &b));
                }
                if rows.is_empty() {
                    bail!(
                        "no common round checkpoints in {} and {}",
                        ra.display(),
                        rb.display()
                    );
                }
            } else {
                let (s, e) = (
                    start.expect("clap requires start"),
                    end.expect("clap requires end"),
                );
                let path = ModePath::linear(load_model(&s, &data)?, load_model(&e, &data)?)?;
                let b = connectivity::barrier(&path, d, cfg.fed.loss, grid)?;
                rows.push(BarrierRow::new("pair".into(), &b));
            }
            experiment::write_csv_with_header(&out, BARRIER_HEADER, &rows)?;
            for r in &rows {
                println!(
                    "{}: B={:.6} absolute={:.6}",
                    r.round_or_pair, r.b, r.absolute_barrier
                );
            }
        }
        Command::Compare {
            common,
            a,
            b,
            init,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let (pa, pb, p0) = (
                load_model(&a, &data)?,
                load_model(&b, &data)?,
                load_model(&init, &data)?,
            );
            let mut rows = Vec::new();
            for d in [&data.train, &data.test] {
                rows.push(CompareRow {
                    alpha_a: a.display().to_string(),
                    alpha_b: b.display().to_string(),
                    dataset: d.name().to_string(),
                    function_dissimilarity: connectivity::function_dissimilarity(&pa, &pb, d)?,
                    weight_distance: connectivity::weight_distance(&pa, &pb, &p0)?,
                    dist_a_to_init: connectivity::weight_distance(&pa, &p0, &p0)?,
                    dist_b_to_init: connectivity::weight_distance(&pb, &p0, &p0)?,
                });
            }
            experiment::write_csv(&out, &rows)?;
            for r in &rows {
                println!(
                    "{}: dissimilarity={:.4} relative distance={:.4}",
                    r.dataset, r.function_dissimilarity, r.weight_distance
                );
            }
        }
        Command::SevenPath {
            common,
            start,
            end,
            per_segment,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg)?;
            let (p, q) = (load_model(&start, &data)?, load_model(&end, &data)?);
            let (profile, s) =
                experiment::seven_path_profile(&p, &q, &data.train, cfg.fed.loss, per_segment)?;
            experiment::write_csv(&out, &experiment::path_rows(&profile, "train"))?;
            println!(
                "max path loss {:.6}, bound {:.6} ({})",
                s.max_path_loss,
                s.bound,
                if s.bound_holds { "holds" } else { "violated" }
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    run(cli)
}
