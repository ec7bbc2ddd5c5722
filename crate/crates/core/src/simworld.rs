//! Synthetic subsurface worlds and simulated data-collection runs.
//!
//! A world is a set of point scatterers and planar (optionally dipping)
//! layers under flat ground. Traces are synthesized with a Ricker source
//! pulse and two-way travel times; the run simulator drives a planar
//! trajectory through the world and emits GPR, IMU, wheel and truth streams.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose3, Rot3};
use crate::graph::{gravity_vector, ImuBias, ImuSample};
use crate::preprocess::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub reflectivity: f64,
}

/// A planar reflector; `depth` is taken at x = 0 and the plane tilts along x
/// by `dip` radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub depth: f64,
    pub reflectivity: f64,
    #[serde(default)]
    pub dip: f64,
}

impl Layer {
    pub fn depth_at(&self, x: f64) -> f64 {
        self.depth + self.dip.tan() * x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Expected scatterers per square metre of ground.
    pub density: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub reflectivity_min: f64,
    pub reflectivity_max: f64,
    pub layers: Vec<Layer>,
    /// Wave velocity, m/ns.
    pub velocity: f64,
    /// Attenuation, 1/m.
    pub attenuation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::feature_dense()
    }
}

impl WorldConfig {
    /// Many shallow scatterers plus two weak dipping layers.
    pub fn feature_dense() -> Self {
        WorldConfig {
            x_min: -5.0,
            x_max: 25.0,
            y_min: -5.0,
            y_max: 10.0,
            density: 1.5,
            depth_min: 0.15,
            depth_max: 1.2,
            reflectivity_min: 0.3,
            reflectivity_max: 1.0,
            layers: vec![
                Layer { depth: 0.6, reflectivity: 0.3, dip: 0.02 },
                Layer { depth: 1.3, reflectivity: 0.4, dip: -0.03 },
            ],
            velocity: 0.1,
            attenuation: 0.5,
        }
    }

    /// Few scatterers; layers dominate the radargram.
    pub fn feature_sparse() -> Self {
        WorldConfig { density: 0.05, ..WorldConfig::feature_dense() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "feature_dense" | "feature-dense" => Ok(Self::feature_dense()),
            "feature_sparse" | "feature-sparse" => Ok(Self::feature_sparse()),
            _ => Err(Error::Config(format!("unknown world preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return bad("empty extent");
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return bad("density must be finite and non-negative");
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min) {
            return bad("depths must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.reflectivity_min)
            || !(0.0..=1.0).contains(&self.reflectivity_max)
            || self.reflectivity_min > self.reflectivity_max
        {
            return bad("reflectivity range must lie in [0, 1]");
        }
        if !(0.05..=0.3).contains(&self.velocity) {
            return bad("velocity must lie in [0.05, 0.3] m/ns");
        }
        if !(self.attenuation >= 0.0) {
            return bad("attenuation must be non-negative");
        }
        for l in &self.layers {
            if !(l.depth > 0.0) || !(0.0..=1.0).contains(&l.reflectivity) || l.dip.abs() >= 1.0 {
                return bad("layer depth must be positive, reflectivity in [0, 1], |dip| < 1 rad");
            }
        }
        Ok(())
    }

    fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsurfaceWorld {
    pub scatterers: Vec<Scatterer>,
    pub layers: Vec<Layer>,
    pub velocity: f64,
    pub attenuation: f64,
    pub seed: u64,
}

/// Samples a world: a Poisson number of scatterers placed uniformly.
pub fn build_world(seed: u64, cfg: &WorldConfig) -> Result<SubsurfaceWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = cfg.density * cfg.area();
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as usize
    } else {
        0
    };
    let scatterers = (0..count)
        .map(|_| Scatterer {
            x: rng.random_range(cfg.x_min..cfg.x_max),
            y: rng.random_range(cfg.y_min..cfg.y_max),
            depth: uniform(&mut rng, cfg.depth_min, cfg.depth_max),
            reflectivity: uniform(&mut rng, cfg.reflectivity_min, cfg.reflectivity_max),
        })
        .collect();
    Ok(SubsurfaceWorld {
        scatterers,
        layers: cfg.layers.clone(),
        velocity: cfg.velocity,
        attenuation: cfg.attenuation,
        seed,
    })
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub samples: usize,
    /// Time window, ns.
    pub time_window: f64,
    pub center_frequency_mhz: f64,
    /// White noise standard deviation, absolute amplitude units.
    pub noise_sigma: f64,
    pub wow_dc: f64,
    pub wow_amplitude: f64,
    pub wow_frequency_mhz: f64,
    pub ringing_amplitude: f64,
    /// Spacing of the ringing replicas, ns.
    pub ringing_period: f64,
    /// Amplitude ratio between successive replicas.
    pub ringing_decay: f64,
    pub ringing_count: usize,
    /// Arrival time of the direct-coupling pulse, ns.
    pub direct_time: f64,
    /// Distance between trace triggers, m.
    pub trigger_spacing: f64,
    /// Relative standard deviation of the antenna-ground coupling, which
    /// scales the direct pulse and its ringing from trace to trace.
    pub coupling_variation: f64,
    /// Correlation length of the coupling variation along the track, m.
    pub coupling_length: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            samples: 160,
            time_window: 40.0,
            center_frequency_mhz: 500.0,
            noise_sigma: 0.01,
            wow_dc: 0.3,
            wow_amplitude: 0.3,
            wow_frequency_mhz: 5.0,
            ringing_amplitude: 3.0,
            ringing_period: 4.0,
            ringing_decay: 0.5,
            ringing_count: 5,
            direct_time: 1.0,
            trigger_spacing: 0.05,
            coupling_variation: 0.5,
            coupling_length: 1.0,
        }
    }
}

impl SensorConfig {
    /// All artifacts and noise switched off.
    pub fn clean() -> Self {
        SensorConfig {
            noise_sigma: 0.0,
            wow_dc: 0.0,
            wow_amplitude: 0.0,
            ringing_amplitude: 0.0,
            ..SensorConfig::default()
        }
    }

    pub fn dt(&self) -> f64 {
        self.time_window / self.samples as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 64 {
            return Err(Error::Config(format!("sensor: samples must be >= 64, got {}", self.samples)));
        }
        if !(self.time_window > 0.0) || !(self.center_frequency_mhz > 0.0) {
            return Err(Error::Config("sensor: time window and frequency must be positive".into()));
        }
        if !(self.trigger_spacing > 0.0) {
            return Err(Error::Config("sensor: trigger spacing must be positive".into()));
        }
        if !(self.coupling_variation >= 0.0 && self.coupling_length > 0.0) {
            return Err(Error::Config("sensor: coupling variation >= 0 and coupling length > 0 required".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.ringing_period > 0.0) {
            return Err(Error::Config("sensor: noise sigma >= 0 and ringing period > 0 required".into()));
        }
        Ok(())
    }
}

/// Ricker wavelet with peak frequency `f_ghz`, evaluated at `tau` ns.
pub fn ricker(tau: f64, f_ghz: f64) -> f64 {
    let a = (std::f64::consts::PI * f_ghz * tau).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

fn add_pulse(out: &mut [f64], dt: f64, t0: f64, amplitude: f64, f_ghz: f64) {
    let support = 3.0 / f_ghz;
    let lo = ((t0 - support) / dt).floor().max(0.0) as usize;
    let hi = (((t0 + support) / dt).ceil() as usize).min(out.len().saturating_sub(1));
    if t0 - support > dt * out.len() as f64 {
        return;
    }
    for (i, v) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
        *v += amplitude * ricker(i as f64 * dt - t0, f_ghz);
    }
}

/// Noise-free trace at the antenna pose: scatterers, layers, wow and
/// ringing. The trace position is left at zero.
pub fn trace_at(world: &SubsurfaceWorld, antenna: &Pose3, cfg: &SensorConfig) -> Trace {
    let n = cfg.samples;
    let dt = cfg.dt();
    let f = cfg.center_frequency_mhz * 1e-3;
    let t_end = n as f64 * dt + 3.0 / f;
    let mut out = vec![0.0; n];
    let (ax, ay) = (antenna.x(), antenna.y());
    for s in &world.scatterers {
        let r2 = (s.x - ax).powi(2) + (s.y - ay).powi(2);
        let range = (s.depth * s.depth + r2).sqrt();
        let t = 2.0 * range / world.velocity;
        if t > t_end {
            continue;
        }
        let path = 2.0 * range;
        add_pulse(&mut out, dt, t, s.reflectivity * (-world.attenuation * path).exp() / path, f);
    }
    for l in &world.layers {
        let d = l.depth_at(ax);
        if d <= 0.0 {
            continue;
        }
        let path = 2.0 * d;
        let t = path / world.velocity;
        if t <= t_end {
            add_pulse(&mut out, dt, t, l.reflectivity * (-world.attenuation * path).exp() / path, f);
        }
    }
    if cfg.ringing_amplitude != 0.0 {
        let mut a = cfg.ringing_amplitude;
        for k in 0..=cfg.ringing_count {
            add_pulse(&mut out, dt, cfg.direct_time + k as f64 * cfg.ringing_period, a, f);
            a *= cfg.ringing_decay;
        }
    }
    if cfg.wow_dc != 0.0 || cfg.wow_amplitude != 0.0 {
        let w = 2.0 * std::f64::consts::PI * cfg.wow_frequency_mhz * 1e-3;
        for (i, v) in out.iter_mut().enumerate() {
            *v += cfg.wow_dc + cfg.wow_amplitude * (w * i as f64 * dt + 0.3).sin();
        }
    }
    Trace { samples: out, dt, position: 0.0 }
}

/// `trace_at` plus white Gaussian noise of `cfg.noise_sigma`.
pub fn noisy_trace_at<R: Rng>(world: &SubsurfaceWorld, antenna: &Pose3, cfg: &SensorConfig, rng: &mut R) -> Trace {
    let mut tr = trace_at(world, antenna, cfg);
    if cfg.noise_sigma > 0.0 {
        for v in &mut tr.samples {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_sigma * z;
        }
    }
    tr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Planar waypoints visited in order with pivot turns between legs.
    pub waypoints: Vec<[f64; 2]>,
    /// Peak along-track speed, m/s.
    pub speed: f64,
    /// Peak pivot yaw rate, rad/s.
    pub yaw_rate: f64,
    pub start_pause: f64,
    pub end_pause: f64,
    /// Stationary time after every pivot turn.
    pub turn_pause: f64,
    /// Half-widths (x, y) of the seeded uniform perturbation applied to
    /// every waypoint after the first, m.
    pub waypoint_jitter: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::forward_backward(20.0)
    }
}

impl TrajectoryConfig {
    pub fn with_waypoints(waypoints: Vec<[f64; 2]>) -> Self {
        TrajectoryConfig {
            waypoints,
            speed: 1.0,
            yaw_rate: 0.8,
            start_pause: 1.0,
            end_pause: 0.5,
            turn_pause: 0.5,
            waypoint_jitter: [0.0, 0.0],
        }
    }

    pub fn straight(length: f64) -> Self {
        Self::with_waypoints(vec![[0.0, 0.0], [length, 0.0]])
    }

    pub fn forward_backward(length: f64) -> Self {
        Self::with_waypoints(vec![[0.0, 0.0], [length, 0.0], [0.0, 0.0]])
    }

    /// Out along an L (`first` m along x, then `second` m along y) and back
    /// the same way.
    pub fn out_and_back(first: f64, second: f64) -> Self {
        Self::with_waypoints(vec![[0.0, 0.0], [first, 0.0], [first, second], [first, 0.0], [0.0, 0.0]])
    }

    /// Rectangle `width × height` driven counter-clockwise `laps` times.
    pub fn rectangle(width: f64, height: f64, laps: usize) -> Self {
        let mut w = vec![[0.0, 0.0]];
        for _ in 0..laps {
            w.extend([[width, 0.0], [width, height], [0.0, height], [0.0, 0.0]]);
        }
        Self::with_waypoints(w)
    }

    /// Back-and-forth passes over one line with turnaround points jittered
    /// along the line, so that repeated passes see varying offsets.
    pub fn survey(length: f64, passes: usize, jitter: f64) -> Self {
        let w = (0..=passes).map(|i| [if i % 2 == 0 { 0.0 } else { length }, 0.0]).collect();
        TrajectoryConfig { waypoint_jitter: [jitter, 0.0], ..Self::with_waypoints(w) }
    }

    /// Waypoints after the seeded jitter; unchanged when the jitter is zero.
    pub fn jittered(&self, seed: u64) -> TrajectoryConfig {
        let [jx, jy] = self.waypoint_jitter;
        if jx == 0.0 && jy == 0.0 {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let mut out = self.clone();
        for w in out.waypoints.iter_mut().skip(1) {
            w[0] += jx * rng.random_range(-1.0..=1.0);
            w[1] += jy * rng.random_range(-1.0..=1.0);
        }
        out
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "straight" => Ok(Self::straight(20.0)),
            "survey" => Ok(Self::survey(20.0, 4, 2.0)),
            "forward_backward" | "forward-backward" => Ok(Self::forward_backward(20.0)),
            "out_and_back" | "out-and-back" => Ok(Self::out_and_back(10.0, 9.0)),
            "loop" | "rectangle" => Ok(Self::rectangle(12.0, 5.0, 2)),
            _ => Err(Error::Config(format!("unknown trajectory preset `{name}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum SegmentKind {
    Pause,
    Turn { delta: f64 },
    Line { length: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    t0: f64,
    duration: f64,
    x0: f64,
    y0: f64,
    yaw0: f64,
    distance0: f64,
    kind: SegmentKind,
}

/// Kinematic state of the vehicle at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub pose: Pose3,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub yaw_rate: f64,
    /// True path length travelled, m.
    pub distance: f64,
}

/// Piecewise minimum-jerk trajectory: pauses, pivot turns and straight legs,
/// each starting and ending at rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    segments: Vec<Segment>,
    duration: f64,
}

/// Minimum-jerk profile `s(τ)` and its first two derivatives in τ.
fn min_jerk(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    (
        t3 * (10.0 - 15.0 * t + 6.0 * t2),
        30.0 * t2 * (1.0 - 2.0 * t + t2),
        60.0 * t * (1.0 - 3.0 * t + 2.0 * t2),
    )
}

/// Ratio of peak to mean speed of the minimum-jerk profile.
const MIN_JERK_PEAK: f64 = 1.875;

impl Trajectory {
    pub fn from_config(cfg: &TrajectoryConfig) -> Result<Self> {
        if cfg.waypoints.is_empty() {
            return Err(Error::Config("trajectory: no waypoints".into()));
        }
        if !(cfg.speed > 0.0 && cfg.yaw_rate > 0.0) {
            return Err(Error::Config("trajectory: speed and yaw rate must be positive".into()));
        }
        if cfg.start_pause < 0.0 || cfg.end_pause < 0.0 || cfg.turn_pause < 0.0 {
            return Err(Error::Config("trajectory: pauses must be non-negative".into()));
        }
        let [mut x, mut y] = cfg.waypoints[0];
        let mut yaw = cfg
            .waypoints
            .iter()
            .skip(1)
            .find(|w| (w[0] - x).hypot(w[1] - y) > 1e-9)
            .map(|w| (w[1] - y).atan2(w[0] - x))
            .unwrap_or(0.0);
        let mut segs = Vec::new();
        let mut t = 0.0;
        let mut dist = 0.0;
        let push = |segs: &mut Vec<Segment>, t: &mut f64, kind, duration: f64, x, y, yaw, dist| {
            if duration > 0.0 {
                segs.push(Segment { t0: *t, duration, x0: x, y0: y, yaw0: yaw, distance0: dist, kind });
                *t += duration;
            }
        };
        push(&mut segs, &mut t, SegmentKind::Pause, cfg.start_pause, x, y, yaw, dist);
        for w in cfg.waypoints.iter().skip(1) {
            let (dx, dy) = (w[0] - x, w[1] - y);
            let length = dx.hypot(dy);
            if length <= 1e-9 {
                continue;
            }
            let heading = dy.atan2(dx);
            let delta = crate::geom::wrap_angle(heading - yaw);
            if delta.abs() > 1e-12 {
                let dur = MIN_JERK_PEAK * delta.abs() / cfg.yaw_rate;
                push(&mut segs, &mut t, SegmentKind::Turn { delta }, dur, x, y, yaw, dist);
                yaw += delta;
                push(&mut segs, &mut t, SegmentKind::Pause, cfg.turn_pause, x, y, yaw, dist);
            }
            let dur = MIN_JERK_PEAK * length / cfg.speed;
            push(&mut segs, &mut t, SegmentKind::Line { length }, dur, x, y, yaw, dist);
            x = w[0];
            y = w[1];
            dist += length;
        }
        push(&mut segs, &mut t, SegmentKind::Pause, cfg.end_pause, x, y, yaw, dist);
        if segs.is_empty() {
            return Err(Error::Config("trajectory: zero duration".into()));
        }
        Ok(Trajectory { segments: segs, duration: t })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Shortest moving segment, s.
    pub fn shortest_segment(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).fold(f64::INFINITY, f64::min)
    }

    pub fn total_distance(&self) -> f64 {
        self.at(self.duration).distance
    }

    pub fn at(&self, t: f64) -> Kinematics {
        let i = self
            .segments
            .partition_point(|s| s.t0 <= t)
            .saturating_sub(1);
        let s = &self.segments[i];
        let tau = (t - s.t0) / s.duration;
        let (p, dp, ddp) = min_jerk(tau);
        let (dp, ddp) = if (0.0..=1.0).contains(&tau) { (dp, ddp) } else { (0.0, 0.0) };
        let (mut x, mut y, mut yaw, mut dist) = (s.x0, s.y0, s.yaw0, s.distance0);
        let mut vel = Vector3::zeros();
        let mut acc = Vector3::zeros();
        let mut yaw_rate = 0.0;
        match s.kind {
            SegmentKind::Pause => {}
            SegmentKind::Turn { delta } => {
                yaw += delta * p;
                yaw_rate = delta * dp / s.duration;
            }
            SegmentKind::Line { length } => {
                let (c, sn) = (yaw.cos(), yaw.sin());
                x += length * p * c;
                y += length * p * sn;
                dist += length * p;
                let v = length * dp / s.duration;
                let a = length * ddp / (s.duration * s.duration);
                vel = Vector3::new(v * c, v * sn, 0.0);
                acc = Vector3::new(a * c, a * sn, 0.0);
            }
        }
        Kinematics {
            pose: Pose3::new(Rot3::rz(yaw), Vector3::new(x, y, 0.0)),
            velocity: vel,
            acceleration: acc,
            yaw_rate,
            distance: dist,
        }
    }
}

/// IMU and wheel error model, plus sensor rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub imu_rate_hz: f64,
    pub wheel_rate_hz: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// Standard deviation of the constant accelerometer bias, m/s².
    pub accel_bias_sigma: f64,
    /// Standard deviation of the constant gyro bias, rad/s.
    pub gyro_bias_sigma: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    /// Standard deviation of the constant wheel scale error (0.01 = 1%).
    pub wheel_scale_sigma: f64,
    /// Stationary standard deviation of the slowly varying scale error.
    pub wheel_scale_wander: f64,
    /// Correlation length of the varying scale error, m.
    pub wheel_scale_length: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            imu_rate_hz: 100.0,
            wheel_rate_hz: 50.0,
            accel_noise_density: 2e-3,
            gyro_noise_density: 2e-4,
            accel_bias_sigma: 0.02,
            gyro_bias_sigma: 1e-3,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-6,
            wheel_scale_sigma: 0.0,
            wheel_scale_wander: 0.01,
            wheel_scale_length: 10.0,
        }
    }
}

impl RunConfig {
    /// Perfect sensors.
    pub fn noise_free() -> Self {
        RunConfig {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_sigma: 0.0,
            gyro_bias_sigma: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            wheel_scale_sigma: 0.0,
            wheel_scale_wander: 0.0,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.imu_rate_hz >= 50.0) {
            return Err(Error::Config(format!("run: IMU rate must be >= 50 Hz, got {}", self.imu_rate_hz)));
        }
        let ratio = self.imu_rate_hz / self.wheel_rate_hz;
        if !(self.wheel_rate_hz > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config("run: wheel rate must divide the IMU rate".into()));
        }
        let vals = [
            self.accel_noise_density,
            self.gyro_noise_density,
            self.accel_bias_sigma,
            self.gyro_bias_sigma,
            self.accel_bias_walk,
            self.gyro_bias_walk,
            self.wheel_scale_sigma,
            self.wheel_scale_wander,
        ];
        if vals.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(self.wheel_scale_length > 0.0) {
            return Err(Error::Config("run: noise parameters must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GprSample {
    pub t: f64,
    /// Trace with `position` set to the measured wheel distance.
    pub trace: Trace,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelSample {
    pub t: f64,
    /// Cumulative distance, m.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub pose: Pose3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub gpr: Vec<GprSample>,
    pub imu: Vec<ImuSample>,
    pub wheel: Vec<WheelSample>,
    pub truth: Vec<TruthSample>,
    /// IMU bias at the first sample (constant part).
    pub initial_bias: ImuBias,
}

impl RawDataset {
    /// Truth pose at `t` by linear interpolation of translation and slerp of rotation.
    pub fn truth_at(&self, t: f64) -> Option<Pose3> {
        let tr = &self.truth;
        if tr.is_empty() || t < tr[0].t - 1e-9 || t > tr[tr.len() - 1].t + 1e-9 {
            return None;
        }
        let i = tr.partition_point(|s| s.t <= t);
        if i == 0 {
            return Some(tr[0].pose);
        }
        if i >= tr.len() {
            return Some(tr[tr.len() - 1].pose);
        }
        let (a, b) = (&tr[i - 1], &tr[i]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let q = a.pose.rotation.quaternion().slerp(b.pose.rotation.quaternion(), w);
        Some(Pose3::new(
            Rot3::from_unit_quaternion(q),
            a.pose.translation * (1.0 - w) + b.pose.translation * w,
        ))
    }

    pub fn start_time(&self) -> f64 {
        self.truth.first().map_or(0.0, |s| s.t)
    }

    pub fn end_time(&self) -> f64 {
        self.truth.last().map_or(0.0, |s| s.t)
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub world: WorldConfig,
    pub sensor: SensorConfig,
    pub trajectory: TrajectoryConfig,
    pub run: RunConfig,
}

/// Drives `trajectory` through `world` and records every sensor stream.
pub fn simulate_run(
    world: &SubsurfaceWorld,
    trajectory: &TrajectoryConfig,
    sensor: &SensorConfig,
    run: &RunConfig,
    seed: u64,
) -> Result<RawDataset> {
    sensor.validate()?;
    run.validate()?;
    if trajectory.waypoint_jitter.iter().any(|j| !(*j >= 0.0 && j.is_finite())) {
        return Err(Error::Config("trajectory: waypoint jitter must be non-negative".into()));
    }
    let traj = Trajectory::from_config(&trajectory.jittered(seed))?;
    let dt = 1.0 / run.imu_rate_hz;
    if traj.shortest_segment() < 2.0 * dt {
        return Err(Error::Config(format!(
            "run: a trajectory segment lasts {:.4} s, shorter than two IMU periods",
            traj.shortest_segment()
        )));
    }
    let steps = (traj.duration() / dt).floor() as usize;
    let wheel_every = (run.imu_rate_hz / run.wheel_rate_hz).round() as usize;

    let mut imu_rng = ChaCha8Rng::seed_from_u64(seed);
    imu_rng.set_stream(1);
    let mut wheel_rng = ChaCha8Rng::seed_from_u64(seed);
    wheel_rng.set_stream(2);
    let mut gpr_rng = ChaCha8Rng::seed_from_u64(seed);
    gpr_rng.set_stream(3);

    let gauss = |rng: &mut ChaCha8Rng, sigma: f64| -> Vector3<f64> {
        if sigma == 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    };
    let mut ba = gauss(&mut imu_rng, run.accel_bias_sigma);
    let mut bg = gauss(&mut imu_rng, run.gyro_bias_sigma);
    let initial_bias = ImuBias::new(ba, bg);
    let accel_sigma = run.accel_noise_density / dt.sqrt();
    let gyro_sigma = run.gyro_noise_density / dt.sqrt();

    let scale_const = if run.wheel_scale_sigma > 0.0 {
        run.wheel_scale_sigma * wheel_rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let mut scale_var = if run.wheel_scale_wander > 0.0 {
        run.wheel_scale_wander * wheel_rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };

    let g = gravity_vector();
    let mut imu = Vec::with_capacity(steps + 1);
    let mut truth = Vec::with_capacity(steps + 1);
    let mut wheel = Vec::with_capacity(steps / wheel_every + 1);
    let mut measured = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    let mut d_meas = 0.0;
    let mut d_prev = 0.0;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let kin = traj.at(t);
        if k > 0 {
            let step = kin.distance - d_prev;
            d_meas += (1.0 + scale_const + scale_var) * step;
            if run.wheel_scale_wander > 0.0 && step > 0.0 {
                let rho = (-step / run.wheel_scale_length).exp();
                let z: f64 = wheel_rng.sample(StandardNormal);
                scale_var = rho * scale_var + run.wheel_scale_wander * (1.0 - rho * rho).sqrt() * z;
            }
            if run.accel_bias_walk > 0.0 {
                ba += gauss(&mut imu_rng, run.accel_bias_walk * dt.sqrt());
            }
            if run.gyro_bias_walk > 0.0 {
                bg += gauss(&mut imu_rng, run.gyro_bias_walk * dt.sqrt());
            }
        }
        d_prev = kin.distance;
        let rot_inv = kin.pose.rotation.inverse();
        let accel = rot_inv.rotate(&(kin.acceleration - g)) + ba + gauss(&mut imu_rng, accel_sigma);
        let gyro = Vector3::new(0.0, 0.0, kin.yaw_rate) + bg + gauss(&mut imu_rng, gyro_sigma);
        imu.push(ImuSample { t, accel, gyro });
        truth.push(TruthSample { t, pose: kin.pose });
        if k % wheel_every == 0 {
            wheel.push(WheelSample { t, distance: d_meas });
        }
        measured.push(d_meas);
        times.push(t);
    }

    // Triggers fire when the measured distance crosses n·spacing; the
    // measured distance is linear between IMU ticks.
    let mut gpr = Vec::new();
    let mut n = 1usize;
    let mut coupling_rng = ChaCha8Rng::seed_from_u64(seed);
    coupling_rng.set_stream(5);
    let rho = (-sensor.trigger_spacing / sensor.coupling_length).exp();
    let mut coupling = if sensor.coupling_variation > 0.0 {
        sensor.coupling_variation * coupling_rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let mut trace_cfg = sensor.clone();
    for k in 1..measured.len() {
        let (d0, d1) = (measured[k - 1], measured[k]);
        loop {
            let target = n as f64 * sensor.trigger_spacing;
            if !(d1 > d0 && target <= d1 + 1e-9 && target > d0) {
                break;
            }
            let w = ((target - d0) / (d1 - d0)).clamp(0.0, 1.0);
            let t = times[k - 1] + w * (times[k] - times[k - 1]);
            let pose = traj.at(t).pose;
            trace_cfg.ringing_amplitude = sensor.ringing_amplitude * (1.0 + coupling);
            let mut trace = noisy_trace_at(world, &pose, &trace_cfg, &mut gpr_rng);
            if sensor.coupling_variation > 0.0 {
                let z: f64 = coupling_rng.sample(StandardNormal);
                coupling = rho * coupling + sensor.coupling_variation * (1.0 - rho * rho).sqrt() * z;
            }
            trace.position = target;
            if gpr.last().is_none_or(|g: &GprSample| t > g.t) {
                gpr.push(GprSample { t, trace });
            }
            n += 1;
        }
    }

    Ok(RawDataset { gpr, imu, wheel, truth, initial_bias })
}

/// Builds the world and runs the simulation from one seed.
pub fn simulate(cfg: &SimulationConfig, seed: u64) -> Result<(SubsurfaceWorld, RawDataset)> {
    let world = build_world(seed, &cfg.world)?;
    let data = simulate_run(&world, &cfg.trajectory, &cfg.sensor, &cfg.run, seed)?;
    Ok((world, data))
}
