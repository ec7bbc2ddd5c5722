//! End-to-end localization.
//!
//! The front end streams the recorded measurements in time order, builds
//! submaps, creates one graph state per submap boundary and decides which
//! submap pairs pass the salience check and the correlation gate. Everything
//! it produces is independent of the registration model, so every back end
//! receives the same loop-closure pairs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;

use crate::app::ate::ate_rmse;
use crate::app::config::{Config, ModelKind};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Pose3};
use crate::graph::imu::{preintegrate, ImuBias, PreintegratedImu};
use crate::graph::{Factor, FactorGraph, State};
use crate::preprocess::{remove_mean_trace, threshold, MeanTraceState, Radargram, TraceProcessor};
use crate::regmodel::{corr_feat_maps, engineered_register, feature_maps, learned_register, FilterBank, LearnedModel};
use crate::simworld::RawDataset;
use crate::solver::{optimize, Session, SolverReport};
use crate::submap::{salience, Rejection, SegmentEvent, Submap, SubmapBuilder};

/// IMU and dead-reckoned wheel motion between two consecutive states.
#[derive(Clone, Debug)]
pub struct OdometryLink {
    pub from: usize,
    pub to: usize,
    pub pim: PreintegratedImu,
    /// Pose of `from` in the frame of `to`, from wheel distance and gyro yaw.
    pub wheel: Pose3,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct SubmapRecord {
    /// Submap with the fully preprocessed image.
    pub submap: Submap,
    /// The stacked image before mean-trace removal and thresholding.
    pub stacked: Radargram,
    /// Gyro-integrated heading at the submap start, rad.
    pub heading: f64,
    pub salience: f64,
    pub salient: bool,
}

/// A submap pair accepted by the gate. `older` and `newer` index
/// [`Frontend::submaps`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedPair {
    pub older: usize,
    pub newer: usize,
    /// The newer submap was driven in the opposite direction and is compared
    /// mirrored.
    pub flipped: bool,
    pub score: f64,
}

/// Creation of one state and the pairs that become available with it.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: usize,
    pub pairs: Vec<GatedPair>,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub state_times: Vec<f64>,
    /// `links[k]` joins state `k` to state `k + 1`.
    pub links: Vec<OdometryLink>,
    pub submaps: Vec<SubmapRecord>,
    pub rejections: Vec<Rejection>,
    /// One step per state after the first.
    pub steps: Vec<Step>,
}

impl Frontend {
    pub fn pairs(&self) -> impl Iterator<Item = &GatedPair> {
        self.steps.iter().flat_map(|s| s.pairs.iter())
    }

    /// Anchor states and flip flag of every gated pair, in creation order.
    pub fn loop_closure_set(&self) -> Vec<(usize, usize, bool)> {
        self.pairs()
            .map(|p| (self.submaps[p.older].submap.anchor, self.submaps[p.newer].submap.anchor, p.flipped))
            .collect()
    }
}

fn check_gaps(name: &str, times: impl Iterator<Item = f64>, max_gap: f64) -> Result<()> {
    let mut prev: Option<f64> = None;
    for t in times {
        if let Some(p) = prev {
            if t - p > max_gap {
                return Err(Error::Stream(format!(
                    "{name} stream gap of {:.3} s between t = {p} s and t = {t} s exceeds {max_gap} s",
                    t - p
                )));
            }
        }
        prev = Some(t);
    }
    Ok(())
}

/// Wheel distance at `t` by linear interpolation, held at the ends.
fn wheel_distance(data: &RawDataset, t: f64) -> f64 {
    let w = &data.wheel;
    let i = w.partition_point(|s| s.t <= t);
    if i == 0 {
        return w[0].distance;
    }
    if i >= w.len() {
        return w[w.len() - 1].distance;
    }
    let (a, b) = (&w[i - 1], &w[i]);
    a.distance + (b.distance - a.distance) * (t - a.t) / (b.t - a.t)
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|v| *v <= x);
    if i == 0 {
        return ys[0];
    }
    if i >= xs.len() {
        return ys[ys.len() - 1];
    }
    let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + w * (ys[i] - ys[i - 1])
}

struct FrontendBuilder<'a> {
    cfg: &'a Config,
    imu_times: Vec<f64>,
    heading: Vec<f64>,
    state_imu: Vec<usize>,
    steps: Vec<Step>,
    submaps: Vec<SubmapRecord>,
    maps: Vec<Option<Vec<DMatrix<f64>>>>,
    rejections: Vec<Rejection>,
    mean: MeanTraceState,
    bank: FilterBank,
}

impl FrontendBuilder<'_> {
    /// State at the IMU tick nearest `t`; reuses the newest state when the
    /// tick does not advance.
    fn ensure_state(&mut self, t: f64) -> usize {
        let i = self.imu_times.partition_point(|v| *v < t);
        let k = if i == 0 {
            0
        } else if i >= self.imu_times.len() {
            self.imu_times.len() - 1
        } else if self.imu_times[i] - t < t - self.imu_times[i - 1] {
            i
        } else {
            i - 1
        };
        let last = *self.state_imu.last().expect("state 0 exists");
        if k <= last {
            return self.state_imu.len() - 1;
        }
        self.state_imu.push(k);
        let state = self.state_imu.len() - 1;
        self.steps.push(Step { state, pairs: Vec::new() });
        state
    }

    fn handle(&mut self, ev: SegmentEvent) -> Result<()> {
        let start = self.ensure_state(ev.start_time());
        let end = self.ensure_state(ev.end_time());
        let mut sm = match ev {
            SegmentEvent::Rejected(r) => {
                self.rejections.push(r);
                return Ok(());
            }
            SegmentEvent::Finalized(sm) => sm,
        };
        sm.anchor = start;
        let stacked = sm.image.clone();
        let cleaned = remove_mean_trace(&sm.image, &mut self.mean)?;
        sm.image = threshold(&cleaned, self.cfg.preprocess.threshold_percentile);
        let score = salience(&sm.image, self.cfg.salience.window);
        let salient = score >= self.cfg.salience.threshold;
        let heading = interp(&self.imu_times, &self.heading, sm.start_time);
        let newer = self.submaps.len();
        let record = SubmapRecord { submap: sm, stacked, heading, salience: score, salient };
        if !salient {
            self.submaps.push(record);
            self.maps.push(None);
            return Ok(());
        }
        let maps = feature_maps(&record.submap.image, &self.bank)?;
        let mirrored = feature_maps(&record.submap.image.mirrored(), &self.bank)?;
        let gap = self.cfg.pipeline.min_anchor_gap;
        let candidates: Vec<usize> = (0..newer)
            .rev()
            .filter(|&i| self.maps[i].is_some() && start >= self.submaps[i].submap.anchor + gap)
            .take(self.cfg.pipeline.candidate_cap)
            .collect();
        let reg = &self.cfg.registration;
        let threshold = self.cfg.salience.gate_threshold;
        let mut pairs: Vec<GatedPair> = candidates
            .par_iter()
            .filter_map(|&i| {
                let old = &self.submaps[i];
                let flipped = wrap_angle(heading - old.heading).abs() >= 0.5 * PI;
                let f2 = if flipped { &mirrored } else { &maps };
                let f1 = self.maps[i].as_ref().expect("salient submaps keep feature maps");
                let cols = old.submap.cols().min(record.submap.cols());
                let cf = corr_feat_maps(f1, f2, cols, reg);
                (cf.gate_score >= threshold).then_some(GatedPair { older: i, newer, flipped, score: cf.gate_score })
            })
            .collect();
        pairs.sort_by_key(|p| p.older);
        self.submaps.push(record);
        self.maps.push(Some(maps));
        if end > 0 {
            self.steps[end - 1].pairs.extend(pairs);
        }
        Ok(())
    }
}

/// Runs the model-independent half of the pipeline.
pub fn frontend(data: &RawDataset, cfg: &Config) -> Result<Frontend> {
    cfg.validate()?;
    if data.imu.len() < 2 || data.wheel.len() < 2 {
        return Err(Error::TooFew { needed: 2, have: data.imu.len().min(data.wheel.len()) });
    }
    let max_gap = cfg.pipeline.max_stream_gap;
    check_gaps("imu", data.imu.iter().map(|s| s.t), max_gap)?;
    check_gaps("wheel", data.wheel.iter().map(|s| s.t), max_gap)?;

    let imu_times: Vec<f64> = data.imu.iter().map(|s| s.t).collect();
    let mut heading = vec![0.0; imu_times.len()];
    for k in 1..imu_times.len() {
        let w = 0.5 * (data.imu[k - 1].gyro.z + data.imu[k].gyro.z);
        heading[k] = heading[k - 1] + w * (imu_times[k] - imu_times[k - 1]);
    }
    let mut fb = FrontendBuilder {
        cfg,
        imu_times,
        heading,
        state_imu: vec![0],
        steps: Vec::new(),
        submaps: Vec::new(),
        maps: Vec::new(),
        rejections: Vec::new(),
        mean: MeanTraceState::default(),
        bank: FilterBank::standard(cfg.pipeline.bank_size, cfg.pipeline.bank_seed)?,
    };

    let mut processor = TraceProcessor::new(cfg.preprocess.clone())?;
    let mut builder = SubmapBuilder::new(cfg.submap.clone())?;
    let window = cfg.preprocess.local_average.max(1);
    let (t_first, t_last) = (fb.imu_times[0], *fb.imu_times.last().expect("two samples"));
    let mut recent: Vec<(f64, f64)> = Vec::with_capacity(window);
    let mut k = 1;
    for g in data.gpr.iter().filter(|g| g.t >= t_first && g.t <= t_last) {
        recent.push((g.trace.position, g.t));
        if recent.len() > window {
            recent.remove(0);
        }
        let trace = processor.process(g.trace.clone())?;
        // Time at which the vehicle passed the window-mean position.
        let (pos, times): (Vec<f64>, Vec<f64>) = recent.iter().copied().unzip();
        let time = if pos[pos.len() - 1] > pos[0] { interp(&pos, &times, trace.position) } else { g.t };
        while k < fb.imu_times.len() && fb.imu_times[k] <= time {
            let w = 0.5 * (data.imu[k - 1].gyro.z + data.imu[k].gyro.z);
            builder.observe_gyro(fb.imu_times[k] - fb.imu_times[k - 1], w);
            k += 1;
        }
        for ev in builder.push(trace, time)? {
            fb.handle(ev)?;
        }
    }
    while k < fb.imu_times.len() {
        let w = 0.5 * (data.imu[k - 1].gyro.z + data.imu[k].gyro.z);
        builder.observe_gyro(fb.imu_times[k] - fb.imu_times[k - 1], w);
        k += 1;
    }
    if let Some(ev) = builder.flush()? {
        fb.handle(ev)?;
    }
    fb.ensure_state(t_last);

    let mut links = Vec::with_capacity(fb.state_imu.len().saturating_sub(1));
    for (s, pair) in fb.state_imu.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let pim = preintegrate(&data.imu[a..=b], ImuBias::zero(), &cfg.noise.imu)?;
        let (wheel, distance) = dead_reckon(data, &fb.imu_times, a, b);
        links.push(OdometryLink { from: s, to: s + 1, pim, wheel, distance });
    }
    let state_times = fb.state_imu.iter().map(|&k| fb.imu_times[k]).collect();
    Ok(Frontend { state_times, links, submaps: fb.submaps, rejections: fb.rejections, steps: fb.steps })
}

/// Planar motion between IMU ticks `a` and `b` from wheel distance and gyro
/// yaw, returned as the pose of the start in the end frame.
fn dead_reckon(data: &RawDataset, times: &[f64], a: usize, b: usize) -> (Pose3, f64) {
    let (mut x, mut y, mut h) = (0.0, 0.0, 0.0);
    let mut d_prev = wheel_distance(data, times[a]);
    let d_start = d_prev;
    for k in a + 1..=b {
        let dt = times[k] - times[k - 1];
        let w = 0.5 * (data.imu[k - 1].gyro.z + data.imu[k].gyro.z);
        let d = wheel_distance(data, times[k]);
        let mid = h + 0.5 * w * dt;
        x += (d - d_prev) * mid.cos();
        y += (d - d_prev) * mid.sin();
        h += w * dt;
        d_prev = d;
    }
    (Pose3::planar(x, y, h).inverse(), d_prev - d_start)
}

/// Relative-pose source of the GPR factors.
#[derive(Clone, Copy, Debug)]
pub enum Backend<'a> {
    OdometryOnly,
    Engineered,
    Learned(&'a LearnedModel),
    Oracle,
}

impl Backend<'_> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Backend::OdometryOnly => ModelKind::OdometryOnly,
            Backend::Engineered => ModelKind::Engineered,
            Backend::Learned(_) => ModelKind::Learned,
            Backend::Oracle => ModelKind::Oracle,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosure {
    pub from: usize,
    pub to: usize,
    pub flipped: bool,
    /// Pose of `from` in the frame of `to`.
    pub measurement: Pose3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub time: f64,
    /// ATE over every state so far, once three exist.
    pub ate: Option<f64>,
    /// Position error of the newest state, m.
    pub current_error: f64,
    /// Loop closures added at this step.
    pub closures: usize,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: ModelKind,
    pub estimate: Vec<(f64, Pose3)>,
    /// Gated pairs as (older anchor, newer anchor, flipped), whether or not
    /// the model turned them into factors.
    pub loop_closure_set: Vec<(usize, usize, bool)>,
    /// GPR factors added.
    pub closures: Vec<LoopClosure>,
    pub history: Vec<HistoryRow>,
    pub graph: FactorGraph,
    pub final_cost: f64,
    pub last_report: SolverReport,
}

impl PipelineRun {
    pub fn history_csv(&self) -> String {
        history_to_csv(&self.history)
    }
}

pub const HISTORY_HEADER: &str = "time,ate,current_error,closures";

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for h in rows {
        let ate = h.ate.map_or(String::new(), |v| format!("{v}"));
        s.push_str(&format!("{},{ate},{},{}\n", h.time, h.current_error, h.closures));
    }
    s
}

pub fn history_from_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Data(format!("history: header must be `{HISTORY_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Data(format!("history line {}: `{l}`", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(HistoryRow {
                time: num(f[0])?,
                ate: if f[1].is_empty() { None } else { Some(num(f[1])?) },
                current_error: num(f[2])?,
                closures: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn truth_pose(data: &RawDataset, t: f64) -> Result<Pose3> {
    data.truth_at(t).ok_or_else(|| Error::Data(format!("no ground truth at t = {t} s")))
}

/// Initial state: truth pose at the first IMU tick, velocity by finite
/// difference of the truth, zero bias.
pub fn initial_state(data: &RawDataset, t0: f64) -> Result<State> {
    let p0 = truth_pose(data, t0)?;
    let h = 0.01;
    let v = match data.truth_at(t0 + h) {
        Some(p1) => (p1.translation - p0.translation) / h,
        None => Vector3::zeros(),
    };
    Ok(State::new(p0, v, ImuBias::zero()))
}

/// Pose of the older anchor in the newer anchor's frame for an along-track
/// translation `t` of the (possibly mirrored) newer image.
pub fn loop_measurement(translation: f64, flipped: bool, newer_length: f64) -> Pose3 {
    if flipped {
        Pose3::planar(translation + newer_length, 0.0, PI)
    } else {
        Pose3::planar(-translation, 0.0, 0.0)
    }
}

fn closure_for(front: &Frontend, data: &RawDataset, cfg: &Config, backend: Backend, p: &GatedPair) -> Result<Option<LoopClosure>> {
    let (old, new) = (&front.submaps[p.older].submap, &front.submaps[p.newer].submap);
    let (from, to) = (old.anchor, new.anchor);
    let image2 = if p.flipped { new.image.mirrored() } else { new.image.clone() };
    let length = (new.cols() - 1) as f64 * new.spacing();
    let reg = &cfg.registration;
    let measurement = match backend {
        Backend::OdometryOnly => return Ok(None),
        Backend::Engineered => {
            let r = engineered_register(&old.image, &image2, reg, cfg.salience.gate_threshold)?;
            loop_measurement(r.translation, p.flipped, length)
        }
        Backend::Learned(model) => {
            let r = learned_register(&old.image, &image2, model, reg)?;
            loop_measurement(r.translation, p.flipped, length)
        }
        Backend::Oracle => {
            let a = truth_pose(data, front.state_times[from])?;
            let b = truth_pose(data, front.state_times[to])?;
            b.inverse().compose(&a)
        }
    };
    Ok(Some(LoopClosure { from, to, flipped: p.flipped, measurement }))
}

/// Incremental smoothing over the front-end output with one registration
/// model.
pub fn backend(front: &Frontend, data: &RawDataset, cfg: &Config, backend: Backend) -> Result<PipelineRun> {
    let mut session = Session::new(cfg.solver.clone())?;
    let noise = &cfg.noise;
    let gpr_noise = noise.gpr_noise()?;
    let s0 = initial_state(data, front.state_times[0])?;
    session.update(1, vec![Factor::prior(0, s0, &noise.prior_sigmas())?])?;
    let mut closures = Vec::new();
    let mut history = Vec::with_capacity(front.steps.len());
    for step in &front.steps {
        let link = &front.links[step.state - 1];
        let mut factors = vec![
            Factor::imu(link.from, link.to, link.pim.clone(), &noise.imu)?,
            Factor::wheel(link.from, link.to, link.wheel, noise.wheel_noise(link.distance)?),
        ];
        let mut added = 0;
        for p in &step.pairs {
            if let Some(c) = closure_for(front, data, cfg, backend, p)? {
                factors.push(Factor::gpr(c.from, c.to, c.measurement, gpr_noise.clone()));
                closures.push(c);
                added += 1;
            }
        }
        let est = session.update(1, factors)?;
        let t = front.state_times[step.state];
        let current_error = (est[step.state].pose.translation - truth_pose(data, t)?.translation).norm();
        let so_far: Vec<(f64, Pose3)> = est.iter().zip(&front.state_times).map(|(s, t)| (*t, s.pose)).collect();
        let truth: Vec<(f64, Pose3)> =
            front.state_times.iter().take(est.len()).map(|t| truth_pose(data, *t).map(|p| (*t, p))).collect::<Result<_>>()?;
        let ate = ate_rmse(&so_far, &truth).ok();
        history.push(HistoryRow { time: t, ate, current_error, closures: added });
    }
    let estimate = session.estimate().iter().zip(&front.state_times).map(|(s, t)| (*t, s.pose)).collect();
    Ok(PipelineRun {
        model: backend.kind(),
        estimate,
        loop_closure_set: front.loop_closure_set(),
        closures,
        history,
        final_cost: session.cost(),
        last_report: session.last_report().clone(),
        graph: session.graph().clone(),
    })
}

/// Front end followed by one back end.
pub fn run_pipeline(data: &RawDataset, cfg: &Config, model: Backend) -> Result<(Frontend, PipelineRun)> {
    let front = frontend(data, cfg)?;
    let run = backend(&front, data, cfg, model)?;
    Ok((front, run))
}

/// Truth poses at the state times.
pub fn truth_at_states(front: &Frontend, data: &RawDataset) -> Result<Vec<(f64, Pose3)>> {
    front.state_times.iter().map(|t| truth_pose(data, *t).map(|p| (*t, p))).collect()
}

/// States chained from the initial state through the wheel measurements.
pub fn dead_reckoning(front: &Frontend, data: &RawDataset) -> Result<Vec<State>> {
    let mut out = vec![initial_state(data, front.state_times[0])?];
    for link in &front.links {
        let prev = out[link.from];
        out.push(State { pose: prev.pose.compose(&link.wheel.inverse()), ..prev });
    }
    Ok(out)
}

/// One-shot batch solve of a finished run's graph from dead reckoning.
pub fn batch_solve(front: &Frontend, data: &RawDataset, run: &PipelineRun, cfg: &Config) -> Result<(Vec<State>, SolverReport)> {
    let init = dead_reckoning(front, data)?;
    optimize(&run.graph, &init, &cfg.solver)
}
