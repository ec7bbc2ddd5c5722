//! Trace and radargram filters.
//!
//! The processing chain is fixed: local average, dewow, SEC gain, stacking
//! into a radargram (done by [`crate::submap`]), running mean-trace removal and
//! thresholding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest gain factor applied by [`sec_gain`].
pub const MAX_GAIN: f64 = 1e6;

/// One GPR waveform: amplitude against two-way travel time.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub samples: Vec<f64>,
    /// Sample period in nanoseconds. Sample `i` is at `i * dt`.
    pub dt: f64,
    /// Cumulative wheel distance at which the trace was recorded, meters.
    pub position: f64,
}

impl Trace {
    pub fn new(samples: Vec<f64>, dt: f64, position: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Data(format!("trace sample period must be positive, got {dt}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("trace contains non-finite samples".into()));
        }
        Ok(Trace { samples, dt, position })
    }

    pub fn zeros(len: usize, dt: f64, position: f64) -> Self {
        Trace { samples: vec![0.0; len], dt, position }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    fn with_samples(&self, samples: Vec<f64>) -> Trace {
        Trace { samples, dt: self.dt, position: self.position }
    }
}

/// Which filters have touched a radargram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub averaged: bool,
    pub dewowed: bool,
    pub gained: bool,
    pub mean_removed: bool,
    pub thresholded: bool,
}

/// Stacked traces. Rows are time samples, columns are along-track positions
/// with uniform spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Radargram {
    pub data: DMatrix<f64>,
    pub dt: f64,
    /// Column spacing in meters.
    pub spacing: f64,
    pub provenance: Provenance,
}

impl Radargram {
    pub fn new(data: DMatrix<f64>, dt: f64, spacing: f64) -> Self {
        Radargram { data, dt, spacing, provenance: Provenance::default() }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Column order reversed, as seen when the same ground is driven in the
    /// opposite direction.
    pub fn mirrored(&self) -> Radargram {
        let n = self.cols();
        let data = DMatrix::from_fn(self.rows(), n, |r, c| self.data[(r, n - 1 - c)]);
        Radargram { data, ..self.clone() }
    }

    /// Mean absolute value of the per-row means: the energy of horizontal
    /// banding.
    pub fn banding_energy(&self) -> f64 {
        let n = self.cols().max(1) as f64;
        let total: f64 = self.data.row_iter().map(|r| (r.sum() / n).abs()).sum();
        total / self.rows().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Exponential gain constant, 1/ns.
    pub gain_a: f64,
    /// Power gain constant.
    pub gain_b: f64,
    /// Radar center frequency, MHz. The dewow corner sits at a tenth of it.
    pub center_frequency_mhz: f64,
    /// Number of consecutive traces averaged together.
    pub local_average: usize,
    /// Percentile of |amplitude| below which pixels are zeroed.
    pub threshold_percentile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            gain_a: 0.05,
            gain_b: 1.0,
            center_frequency_mhz: 500.0,
            local_average: 3,
            threshold_percentile: 50.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_a >= 0.0 && self.gain_b >= 0.0) {
            return Err(Error::Config("gain constants must be non-negative".into()));
        }
        if !(self.threshold_percentile > 0.0 && self.threshold_percentile < 100.0) {
            return Err(Error::Config("threshold percentile must lie in (0, 100)".into()));
        }
        if !(self.center_frequency_mhz > 0.0) {
            return Err(Error::Config("center frequency must be positive".into()));
        }
        if self.local_average == 0 {
            return Err(Error::Config("local average window must be at least 1".into()));
        }
        Ok(())
    }

    /// Low-cut corner of the dewow filter, MHz.
    pub fn dewow_corner_mhz(&self) -> f64 {
        self.center_frequency_mhz / 10.0
    }
}

/// Sample-wise mean of a window of traces; the position tag is the mean
/// position.
pub fn local_average(traces: &[Trace]) -> Result<Trace> {
    let first = traces.first().ok_or(Error::TooFew { needed: 1, have: 0 })?;
    let n = first.len();
    let mut acc = vec![0.0; n];
    let mut pos = 0.0;
    for t in traces {
        if t.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: t.len() });
        }
        for (a, s) in acc.iter_mut().zip(&t.samples) {
            *a += s;
        }
        pos += t.position;
    }
    let k = traces.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(Trace { samples: acc, dt: first.dt, position: pos / k })
}

fn subtract_mean(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

// First-order RC high-pass, assuming the input held its first value forever
// before sample 0.
fn high_pass(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for i in 1..x.len() {
        y[i] = alpha * (y[i - 1] + x[i] - x[i - 1]);
    }
    y
}

/// DC subtraction followed by a zero-phase first-order high-pass (applied
/// forward then backward) with the given corner frequency.
pub fn dewow_with_corner(trace: &Trace, corner_mhz: f64) -> Trace {
    let mut x = trace.samples.clone();
    subtract_mean(&mut x);
    // dt is in ns, so the corner goes to GHz.
    let rc = 1.0 / (2.0 * std::f64::consts::PI * corner_mhz * 1e-3);
    let alpha = rc / (rc + trace.dt);
    let fwd = high_pass(&x, alpha);
    let rev: Vec<f64> = fwd.into_iter().rev().collect();
    let mut y: Vec<f64> = high_pass(&rev, alpha).into_iter().rev().collect();
    subtract_mean(&mut y);
    trace.with_samples(y)
}

pub fn dewow(trace: &Trace, cfg: &PreprocessConfig) -> Trace {
    dewow_with_corner(trace, cfg.dewow_corner_mhz())
}

/// `G(t) = exp(a t) t^b` sampled on the trace time axis, with `0⁰ = 1` and
/// clamped to [`MAX_GAIN`].
pub fn gain_curve(len: usize, dt: f64, a: f64, b: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 * dt;
            let power = if b == 0.0 { 1.0 } else { t.powf(b) };
            ((a * t).exp() * power).min(MAX_GAIN)
        })
        .collect()
}

pub fn sec_gain(trace: &Trace, a: f64, b: f64) -> Trace {
    let g = gain_curve(trace.len(), trace.dt, a, b);
    trace.with_samples(trace.samples.iter().zip(&g).map(|(s, g)| s * g).collect())
}

/// Running mean trace over every column seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanTraceState {
    pub count: usize,
    pub mean: Vec<f64>,
}

impl MeanTraceState {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Subtracts the running mean trace from every column, then folds this
/// image's columns into the running mean. On an empty state the image's own
/// column mean is subtracted.
pub fn remove_mean_trace(img: &Radargram, state: &mut MeanTraceState) -> Result<Radargram> {
    let rows = img.rows();
    let cols = img.cols();
    let own_mean: DVector<f64> = if cols > 0 {
        img.data.column_sum() / cols as f64
    } else {
        DVector::zeros(rows)
    };
    let reference = if state.is_empty() {
        own_mean.clone()
    } else {
        if state.mean.len() != rows {
            return Err(Error::LengthMismatch { expected: state.mean.len(), got: rows });
        }
        DVector::from_column_slice(&state.mean)
    };
    let mut out = img.clone();
    for mut col in out.data.column_iter_mut() {
        col -= &reference;
    }
    out.provenance.mean_removed = true;

    let total = state.count + cols;
    if total > 0 {
        let mut mean = if state.is_empty() { vec![0.0; rows] } else { state.mean.clone() };
        for (r, m) in mean.iter_mut().enumerate() {
            *m = (*m * state.count as f64 + own_mean[r] * cols as f64) / total as f64;
        }
        state.mean = mean;
        state.count = total;
    }
    Ok(out)
}

/// Zeroes the `p` percent of pixels with the smallest magnitude, keeping the
/// sign of the rest. Ties are broken by pixel order, so the output always has
/// at least `p/100` zeros.
pub fn threshold(img: &Radargram, percentile: f64) -> Radargram {
    let n = img.data.len();
    let mut out = img.clone();
    out.provenance.thresholded = true;
    // Guard against the count rounding up from floating noise near 0.
    let drop = ((percentile / 100.0) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if drop == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let values = img.data.as_slice();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let slice = out.data.as_mut_slice();
    for &i in order.iter().take(drop.min(n)) {
        slice[i] = 0.0;
    }
    out
}

/// Streaming front half of the chain: local average, dewow and gain, one
/// trace at a time.
#[derive(Clone, Debug)]
pub struct TraceProcessor {
    cfg: PreprocessConfig,
    window: Vec<Trace>,
    gain: Vec<f64>,
}

impl TraceProcessor {
    pub fn new(cfg: PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TraceProcessor { cfg, window: Vec::new(), gain: Vec::new() })
    }

    /// Pushes a raw trace and returns the processed trace centered on the
    /// trailing window (position tag and timestamp are window means).
    pub fn process(&mut self, trace: Trace) -> Result<Trace> {
        if let Some(prev) = self.window.last() {
            if prev.len() != trace.len() {
                return Err(Error::LengthMismatch { expected: prev.len(), got: trace.len() });
            }
        }
        self.window.push(trace);
        if self.window.len() > self.cfg.local_average {
            self.window.remove(0);
        }
        let avg = local_average(&self.window)?;
        let dewowed = dewow(&avg, &self.cfg);
        if self.gain.len() != dewowed.len() {
            self.gain = gain_curve(dewowed.len(), dewowed.dt, self.cfg.gain_a, self.cfg.gain_b);
        }
        let samples = dewowed.samples.iter().zip(&self.gain).map(|(s, g)| s * g).collect();
        Ok(dewowed.with_samples(samples))
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(samples: Vec<f64>) -> Trace {
        Trace::new(samples, 0.5, 0.0).unwrap()
    }

    #[test]
    fn local_average_cases() {
        let a = trace(vec![1.0, -2.0, 3.0]);
        assert_eq!(local_average(std::slice::from_ref(&a)).unwrap(), a);
        let b = trace(vec![-1.0, 2.0, -3.0]);
        assert!(local_average(&[a.clone(), b]).unwrap().samples.iter().all(|&v| v == 0.0));
        let consts: Vec<Trace> = (1..=3).map(|c| trace(vec![c as f64; 4])).collect();
        assert_eq!(local_average(&consts).unwrap().samples, vec![2.0; 4]);
        assert!(matches!(local_average(&[]), Err(Error::TooFew { .. })));
    }

    #[test]
    fn local_average_rejects_mixed_lengths() {
        let r = local_average(&[trace(vec![0.0; 3]), trace(vec![0.0; 4])]);
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn dewow_removes_constant() {
        let out = dewow_with_corner(&trace(vec![3.7; 200]), 50.0);
        assert!(out.samples.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gain_special_cases() {
        let unit = Trace::new(vec![1.0; 10], 0.5, 0.0).unwrap();
        assert_eq!(sec_gain(&unit, 0.0, 0.0), unit);
        let lin = sec_gain(&unit, 0.0, 1.0);
        for (i, v) in lin.samples.iter().enumerate() {
            assert!((v - 0.5 * i as f64).abs() < 1e-15);
        }
        let e = sec_gain(&unit, std::f64::consts::LN_2, 0.0);
        assert!((e.samples[6] - 8.0).abs() < 1e-12);
        let huge = sec_gain(&unit, 10.0, 0.0);
        assert_eq!(huge.samples[9], MAX_GAIN);
    }

    #[test]
    fn mean_trace_bootstrap_and_update() {
        let data = DMatrix::from_fn(4, 3, |r, c| (r + c) as f64);
        let img = Radargram::new(data, 0.5, 0.05);
        let mut st = MeanTraceState::default();
        let out = remove_mean_trace(&img, &mut st).unwrap();
        assert!(out.data.row_iter().all(|r| r.sum().abs() < 1e-12));
        assert_eq!(st.count, 3);
        assert_eq!(st.mean, vec![1.0, 2.0, 3.0, 4.0]);

        let flat = Radargram::new(DMatrix::from_fn(4, 2, |r, _| 1.0 + r as f64), 0.5, 0.05);
        let z = remove_mean_trace(&flat, &mut st).unwrap();
        assert!(z.data.iter().all(|v| v.abs() < 1e-12));

        let mut bad = MeanTraceState { count: 1, mean: vec![0.0; 2] };
        assert!(remove_mean_trace(&img, &mut bad).is_err());
    }

    #[test]
    fn threshold_bimodal() {
        let data = DMatrix::from_fn(2, 4, |r, c| if (r + c) % 2 == 0 { 0.0 } else { 1.0 });
        let img = Radargram::new(data.clone(), 0.5, 0.05);
        let out = threshold(&img, 50.0);
        assert_eq!(out.data, data);
        let tiny = threshold(&img, 1e-9);
        assert_eq!(tiny.data, data);
    }

    #[test]
    fn threshold_ties_still_reach_sparsity() {
        let img = Radargram::new(DMatrix::from_element(5, 5, -2.0), 0.5, 0.05);
        let out = threshold(&img, 30.0);
        let zeros = out.data.iter().filter(|v| **v == 0.0).count();
        assert!(zeros as f64 >= 0.3 * 25.0);
        assert!(out.data.iter().all(|v| *v == 0.0 || *v == -2.0));
    }

    #[test]
    fn config_validation() {
        let mut c = PreprocessConfig::default();
        assert!(c.validate().is_ok());
        c.threshold_percentile = 100.0;
        assert!(c.validate().is_err());
        c.threshold_percentile = 50.0;
        c.gain_a = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn processor_averages_trailing_window() {
        let mut p = TraceProcessor::new(PreprocessConfig { local_average: 2, ..Default::default() }).unwrap();
        let t0 = Trace::new(vec![0.0; 8], 0.5, 0.0).unwrap();
        let t1 = Trace::new(vec![0.0; 8], 0.5, 0.1).unwrap();
        p.process(t0).unwrap();
        let out = p.process(t1).unwrap();
        assert!((out.position - 0.05).abs() < 1e-15);
        assert_eq!(p.window_len(), 2);
    }
}
