//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error, 3
//! numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::app::ate::{ate_rmse, EstimateProvenance, TrajectoryEstimate};
use crate::app::config::{Config, ModelKind};
use crate::app::dataset::{dataset_hash, read_dataset, write_dataset, Dataset, DatasetMeta};
use crate::app::model_io::{load_model, save_model};
use crate::app::pipeline::{frontend, history_from_csv, run_pipeline, Backend};
use crate::app::plot::{ate_over_time_plot, trajectory_plot};
use crate::app::train::train_command;
use crate::error::{Error, Result};
use crate::geom::Pose3;
use crate::regmodel::LearnedModel;
use crate::simworld::{simulate, RawDataset};

pub const HISTORY_FILE: &str = "history.csv";
pub const SOLVER_FILE: &str = "solver.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const REPORT_FILE: &str = "validation.txt";

#[derive(Debug, Parser)]
#[command(name = "gprloc", version, about = "GPR localization: simulate, train, localize and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the front end and write submaps and gated pairs.
    Preprocess {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the registration head on two or more datasets.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, required = true, num_args = 1..)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the trajectory of a dataset.
    Localize {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        /// `odometry-only`, `engineered`, `oracle`, `learned` or a model file.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ATE of an estimate against the dataset's ground truth.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `localize`.
        #[arg(long, alias = "out")]
        estimate: PathBuf,
    },
    /// Write trajectory and ATE-over-time figures (SVG + CSV).
    Plot {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(arg: &ConfigArg) -> Result<Config> {
    match &arg.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// The back end selected by `--model`, falling back to the configuration.
fn select_model(arg: Option<&str>, cfg: &Config) -> Result<(ModelKind, Option<LearnedModel>, String)> {
    let (kind, file) = match arg {
        Some(a) => match ModelKind::parse(a) {
            Ok(k) => (k, cfg.pipeline.model_file.clone()),
            Err(_) if Path::new(a).is_file() => (ModelKind::Learned, Some(a.to_string())),
            Err(_) => return Err(Error::Config(format!("`{a}` is neither a model name nor a model file"))),
        },
        None => (cfg.pipeline.model, cfg.pipeline.model_file.clone()),
    };
    if kind != ModelKind::Learned {
        return Ok((kind, None, kind.name().to_string()));
    }
    let file = file.ok_or_else(|| Error::Config("the learned model needs a model file".into()))?;
    let model = load_model(Path::new(&file))?;
    Ok((kind, Some(model), format!("learned:{file}")))
}

fn truth_list(data: &RawDataset) -> Vec<(f64, Pose3)> {
    data.truth.iter().map(|s| (s.t, s.pose)).collect()
}

fn read_estimate_for(dataset: &Path, estimate: &Path) -> Result<(Dataset, TrajectoryEstimate)> {
    let est = TrajectoryEstimate::read(estimate)?;
    let hash = dataset_hash(dataset)?;
    if est.provenance.dataset_hash != hash {
        return Err(Error::Data(format!(
            "estimate was computed on dataset {} but {} has hash {hash}",
            est.provenance.dataset_hash,
            dataset.display()
        )));
    }
    Ok((read_dataset(dataset)?, est))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate { config, out: dir, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            let (_, data) = simulate(&cfg.simulation, seed)?;
            let ds = Dataset { meta: DatasetMeta::new(seed, cfg.simulation.clone(), &data), data };
            write_dataset(&dir, &ds)?;
            writeln!(
                out,
                "wrote {} traces, {} imu, {} wheel samples to {}",
                ds.data.gpr.len(),
                ds.data.imu.len(),
                ds.data.wheel.len(),
                dir.display()
            )?;
        }
        Command::Preprocess { config, dataset, out: dir } => {
            let cfg = load_config(&config)?;
            let data = read_dataset(&dataset)?.data;
            let front = frontend(&data, &cfg)?;
            std::fs::create_dir_all(&dir)?;
            let mut s = String::from("index,anchor,start_time,end_time,columns,heading,salience,salient\n");
            for (i, r) in front.submaps.iter().enumerate() {
                let m = &r.submap;
                writeln!(
                    s,
                    "{i},{},{},{},{},{},{},{}",
                    m.anchor,
                    m.start_time,
                    m.end_time,
                    m.cols(),
                    r.heading,
                    r.salience,
                    r.salient
                )
                .unwrap();
                let mut img = String::new();
                for row in m.image.data.row_iter() {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                    img.push_str(&cells.join(","));
                    img.push('\n');
                }
                write_file(&dir.join(format!("submap_{i:03}.csv")), &img)?;
            }
            write_file(&dir.join("submaps.csv"), &s)?;
            let mut p = String::from("older,newer,flipped,score\n");
            for g in front.pairs() {
                writeln!(p, "{},{},{},{}", g.older, g.newer, g.flipped, g.score).unwrap();
            }
            write_file(&dir.join("pairs.csv"), &p)?;
            writeln!(
                out,
                "{} submaps ({} salient), {} gated pairs, {} rejected segments",
                front.submaps.len(),
                front.submaps.iter().filter(|r| r.salient).count(),
                front.pairs().count(),
                front.rejections.len()
            )?;
        }
        Command::Train { config, dataset, out: dir, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let sets: Vec<Dataset> = dataset.iter().map(|d| read_dataset(d)).collect::<Result<_>>()?;
            let named: Vec<(String, &RawDataset)> =
                dataset.iter().zip(&sets).map(|(p, d)| (p.display().to_string(), &d.data)).collect();
            let (model, report) = train_command(&named, &cfg)?;
            std::fs::create_dir_all(&dir)?;
            save_model(&dir.join(MODEL_FILE), &model)?;
            let text = report.to_text();
            write_file(&dir.join(REPORT_FILE), &text)?;
            write!(out, "{text}")?;
        }
        Command::Localize { config, dataset, model, out: dir } => {
            let cfg = load_config(&config)?;
            let (kind, learned, name) = select_model(model.as_deref(), &cfg)?;
            let backend = match (kind, &learned) {
                (ModelKind::OdometryOnly, _) => Backend::OdometryOnly,
                (ModelKind::Engineered, _) => Backend::Engineered,
                (ModelKind::Oracle, _) => Backend::Oracle,
                (ModelKind::Learned, Some(m)) => Backend::Learned(m),
                (ModelKind::Learned, None) => return Err(Error::Config("the learned model needs a model file".into())),
            };
            let data = read_dataset(&dataset)?.data;
            let (_, run) = run_pipeline(&data, &cfg, backend)?;
            let est = TrajectoryEstimate {
                poses: run.estimate.clone(),
                provenance: EstimateProvenance { model: name, config_hash: cfg.hash(), dataset_hash: dataset_hash(&dataset)? },
            };
            est.write(&dir)?;
            write_file(&dir.join(HISTORY_FILE), &run.history_csv())?;
            write_file(&dir.join(SOLVER_FILE), &run.last_report.to_csv())?;
            writeln!(out, "{} states, {} loop closures, final cost {:.6e}", est.poses.len(), run.closures.len(), run.final_cost)?;
        }
        Command::Eval { dataset, estimate } => {
            let (ds, est) = read_estimate_for(&dataset, &estimate)?;
            let ate = ate_rmse(&est.poses, &truth_list(&ds.data))?;
            writeln!(out, "ATE {ate:.4} m")?;
        }
        Command::Plot { dataset, estimate, out: dir } => {
            let (ds, est) = read_estimate_for(&dataset, &estimate)?;
            std::fs::create_dir_all(&dir)?;
            let (svg, csv) = trajectory_plot(&truth_list(&ds.data), &est.poses);
            write_file(&dir.join("trajectory.svg"), &svg)?;
            write_file(&dir.join("trajectory.csv"), &csv)?;
            let path = estimate.join(HISTORY_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let (svg, csv) = ate_over_time_plot(&history_from_csv(&text)?);
            write_file(&dir.join("ate_over_time.svg"), &svg)?;
            write_file(&dir.join("ate_over_time.csv"), &csv)?;
            writeln!(out, "wrote figures to {}", dir.display())?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
