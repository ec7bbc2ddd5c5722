//! Synthetic benchmarks: the registration ablation (validation error of the
//! learned, engineered and zeroth-order models) and the drift-correction
//! ablation (ATE of the four back ends on shared loop-closure pairs).

use crate::app::ate::ate_rmse;
use crate::app::config::{Config, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::app::pipeline::{backend, frontend, truth_at_states, Backend, Frontend, PipelineRun};
use crate::app::train::{train_on_frontends, TrainReport};
use crate::error::{Error, Result};
use crate::regmodel::LearnedModel;
use crate::simworld::{simulate, RawDataset, TrajectoryConfig};

/// Speckle level of the standard benchmark as a fraction of each submap
/// image's peak |amplitude|.
pub const SPECKLE_FRACTION: f64 = 0.2;

/// Adds white Gaussian speckle to every submap image, with standard
/// deviation `fraction` times the image's peak |amplitude|. Gating has
/// already happened, so only registration sees the noise.
pub fn add_speckle(front: &mut Frontend, fraction: f64, seed: u64) {
    for (i, rec) in front.submaps.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sigma = fraction * rec.submap.image.data.amax();
        for v in rec.submap.image.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
}

/// The standard registration benchmark configuration: feature-dense world,
/// survey passes over one line.
pub fn registration_config(base: &Config) -> Config {
    let mut cfg = base.clone();
    cfg.simulation.world = crate::simworld::WorldConfig::feature_dense();
    cfg.simulation.trajectory = TrajectoryConfig::survey(20.0, 6, 2.0);
    cfg
}

/// Simulates one dataset per seed, adds speckle to the gated submaps and
/// trains, reporting validation losses.
pub fn registration_benchmark(cfg: &Config, seeds: &[u64]) -> Result<(LearnedModel, TrainReport)> {
    let data: Vec<RawDataset> = seeds.iter().map(|&s| Ok(simulate(&cfg.simulation, s)?.1)).collect::<Result<_>>()?;
    let mut fronts = Vec::with_capacity(data.len());
    for (&s, d) in seeds.iter().zip(&data) {
        let mut front = frontend(d, cfg)?;
        add_speckle(&mut front, SPECKLE_FRACTION, s);
        fronts.push(front);
    }
    let items: Vec<(String, &Frontend, &RawDataset)> =
        seeds.iter().zip(&fronts).zip(&data).map(|((s, f), d)| (format!("seed-{s}"), f, d)).collect();
    train_on_frontends(&items, cfg)
}

#[derive(Clone, Debug)]
pub struct DriftResult {
    pub seed: u64,
    /// ATE per model in [`ModelKind::ALL`] order.
    pub ate: [f64; 4],
    pub runs: Vec<PipelineRun>,
}

/// Runs all four back ends on one simulated dataset, with `speckle` added
/// to the submap images after gating.
pub fn drift_run(cfg: &Config, data: &RawDataset, model: &LearnedModel, seed: u64, speckle: f64) -> Result<DriftResult> {
    let mut front = frontend(data, cfg)?;
    if speckle > 0.0 {
        add_speckle(&mut front, speckle, seed);
    }
    let truth = truth_at_states(&front, data)?;
    let mut ate = [0.0; 4];
    let mut runs = Vec::with_capacity(4);
    for (i, kind) in ModelKind::ALL.iter().enumerate() {
        let b = match kind {
            ModelKind::OdometryOnly => Backend::OdometryOnly,
            ModelKind::Engineered => Backend::Engineered,
            ModelKind::Learned => Backend::Learned(model),
            ModelKind::Oracle => Backend::Oracle,
        };
        let run = backend(&front, data, cfg, b)?;
        ate[i] = ate_rmse(&run.estimate, &truth)?;
        runs.push(run);
    }
    let first = &runs[0].loop_closure_set;
    if runs.iter().any(|r| &r.loop_closure_set != first) {
        return Err(Error::Data("back ends saw different loop-closure sets".into()));
    }
    Ok(DriftResult { seed, ate, runs })
}
