//! Fixed-length submaps resampled onto a uniform along-track grid, with the
//! rule-based validity check and the salience score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Radargram, Trace};

#[derive(Clone, Debug, PartialEq)]
pub struct Submap {
    pub image: Radargram,
    /// Wheel distance of the first column, m.
    pub start: f64,
    /// Wheel distance of the last column, m.
    pub end: f64,
    pub start_time: f64,
    pub end_time: f64,
    /// Graph variable created at the submap start; set by the caller.
    pub anchor: usize,
    /// Sequence number among all segments, finalized or rejected.
    pub index: usize,
}

impl Submap {
    pub fn spacing(&self) -> f64 {
        self.image.spacing
    }

    pub fn cols(&self) -> usize {
        self.image.cols()
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubmapConfig {
    /// Nominal submap length, m.
    pub length: f64,
    /// Column spacing Δx, m.
    pub spacing: f64,
    /// Shortest partial segment kept when the stream ends, m.
    pub min_length: f64,
    /// Largest distance a segment may need to reach its end trace, m. Longer
    /// means a gap in the trace stream.
    pub max_length: f64,
    /// Largest accumulated |yaw| over a segment, rad.
    pub max_cumulative_yaw: f64,
    /// Largest single gyro yaw rate, rad/s.
    pub max_yaw_rate: f64,
    pub min_traces: usize,
}

impl Default for SubmapConfig {
    fn default() -> Self {
        SubmapConfig {
            length: 2.0,
            spacing: 0.05,
            min_length: 1.0,
            max_length: 3.0,
            max_cumulative_yaw: 0.2,
            max_yaw_rate: 0.5,
            min_traces: 10,
        }
    }
}

impl SubmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.length >= self.spacing) {
            return Err(Error::Config("submap: spacing must be positive and not exceed the length".into()));
        }
        if !(self.min_length > 0.0 && self.min_length < self.max_length) {
            return Err(Error::Config("submap: need 0 < min_length < max_length".into()));
        }
        if !(self.min_length <= self.length && self.length <= self.max_length) {
            return Err(Error::Config("submap: length must lie in [min_length, max_length]".into()));
        }
        if !(self.max_cumulative_yaw > 0.0 && self.max_yaw_rate > 0.0 && self.min_traces > 0) {
            return Err(Error::Config("submap: rule thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Column count of a full submap.
    pub fn columns(&self) -> usize {
        (self.length / self.spacing).round() as usize + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    Turning,
    YawRate,
    TooFewTraces,
    TooShort,
    Gap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub reason: RejectReason,
    pub start: f64,
    pub end: f64,
    pub start_time: f64,
    pub end_time: f64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentEvent {
    Finalized(Submap),
    Rejected(Rejection),
}

impl SegmentEvent {
    pub fn end_time(&self) -> f64 {
        match self {
            SegmentEvent::Finalized(s) => s.end_time,
            SegmentEvent::Rejected(r) => r.end_time,
        }
    }

    pub fn start_time(&self) -> f64 {
        match self {
            SegmentEvent::Finalized(s) => s.start_time,
            SegmentEvent::Rejected(r) => r.start_time,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            SegmentEvent::Finalized(s) => s.index,
            SegmentEvent::Rejected(r) => r.index,
        }
    }
}

#[derive(Clone, Debug)]
struct Tagged {
    trace: Trace,
    time: f64,
}

/// Accumulates position-tagged traces into consecutive, non-overlapping
/// segments of the configured length.
#[derive(Clone, Debug)]
pub struct SubmapBuilder {
    cfg: SubmapConfig,
    start: Option<f64>,
    traces: Vec<Tagged>,
    cumulative_yaw: f64,
    peak_rate: f64,
    next_index: usize,
    last_position: f64,
}

impl SubmapBuilder {
    pub fn new(cfg: SubmapConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SubmapBuilder {
            cfg,
            start: None,
            traces: Vec::new(),
            cumulative_yaw: 0.0,
            peak_rate: 0.0,
            next_index: 0,
            last_position: f64::NEG_INFINITY,
        })
    }

    pub fn config(&self) -> &SubmapConfig {
        &self.cfg
    }

    /// Start distance of the open segment, once a trace has been seen.
    pub fn segment_start(&self) -> Option<f64> {
        self.start
    }

    /// Feeds one gyro sample (yaw rate, rad/s, held for `dt` seconds).
    pub fn observe_gyro(&mut self, dt: f64, yaw_rate: f64) {
        if self.start.is_some() {
            self.cumulative_yaw += (yaw_rate * dt).abs();
        }
        self.peak_rate = self.peak_rate.max(yaw_rate.abs());
    }

    /// Feeds one trace (its `position` is the wheel distance). Returns every
    /// segment the trace completes.
    pub fn push(&mut self, trace: Trace, time: f64) -> Result<Vec<SegmentEvent>> {
        let pos = trace.position;
        if !pos.is_finite() {
            return Err(Error::Stream("non-finite wheel distance".into()));
        }
        if pos < self.last_position {
            return Err(Error::Stream(format!(
                "wheel distance decreased from {} to {pos}",
                self.last_position
            )));
        }
        if let Some(first) = self.traces.first() {
            if first.trace.len() != trace.len() {
                return Err(Error::LengthMismatch { expected: first.trace.len(), got: trace.len() });
            }
        }
        self.last_position = pos;
        if self.start.is_none() {
            self.start = Some(pos);
            self.peak_rate = 0.0;
            self.cumulative_yaw = 0.0;
        }
        self.traces.push(Tagged { trace, time });
        let mut events = Vec::new();
        while let Some(start) = self.start {
            let end = start + self.cfg.length;
            if pos < end - 1e-9 {
                break;
            }
            events.push(self.close(start, self.cfg.columns())?);
        }
        Ok(events)
    }

    /// Convenience wrapper: one gyro sample followed by one trace.
    pub fn accumulate(&mut self, trace: Trace, time: f64, yaw_rate: f64, dt: f64) -> Result<Vec<SegmentEvent>> {
        self.observe_gyro(dt, yaw_rate);
        self.push(trace, time)
    }

    /// Closes the open segment at end of stream. Segments of at least
    /// `min_length` are kept with the columns that fit.
    pub fn flush(&mut self) -> Result<Option<SegmentEvent>> {
        let Some(start) = self.start else { return Ok(None) };
        let last = self.traces.last().map_or(start, |t| t.trace.position);
        let span = last - start;
        let cols = (span / self.cfg.spacing + 1e-9).floor() as usize + 1;
        if span + 1e-9 < self.cfg.min_length || cols < 2 {
            let index = self.next_index;
            self.next_index += 1;
            let t0 = self.time_at(start);
            let t1 = self.traces.last().map_or(t0, |t| t.time);
            self.reset(None);
            return Ok(Some(SegmentEvent::Rejected(Rejection {
                reason: RejectReason::TooShort,
                start,
                end: last,
                start_time: t0,
                end_time: t1,
                index,
            })));
        }
        let ev = self.close(start, cols)?;
        self.start = None;
        self.traces.clear();
        Ok(Some(ev))
    }

    fn close(&mut self, start: f64, cols: usize) -> Result<SegmentEvent> {
        let dx = self.cfg.spacing;
        let end = start + (cols - 1) as f64 * dx;
        let index = self.next_index;
        self.next_index += 1;
        let start_time = self.time_at(start);
        let end_time = self.time_at(end);
        let in_segment = self
            .traces
            .iter()
            .filter(|t| t.trace.position >= start - 1e-9 && t.trace.position <= end + 1e-9)
            .count();
        let first_after = self
            .traces
            .iter()
            .find(|t| t.trace.position >= end - 1e-9)
            .map_or(end, |t| t.trace.position);

        let reason = if self.cumulative_yaw > self.cfg.max_cumulative_yaw {
            Some(RejectReason::Turning)
        } else if self.peak_rate > self.cfg.max_yaw_rate {
            Some(RejectReason::YawRate)
        } else if in_segment < self.cfg.min_traces {
            Some(RejectReason::TooFewTraces)
        } else if first_after - start > self.cfg.max_length + 1e-9 {
            Some(RejectReason::Gap)
        } else {
            None
        };
        let event = match reason {
            Some(reason) => SegmentEvent::Rejected(Rejection { reason, start, end, start_time, end_time, index }),
            None => {
                let image = self.resample(start, cols)?;
                SegmentEvent::Finalized(Submap { image, start, end, start_time, end_time, anchor: 0, index })
            }
        };
        self.reset(Some(end));
        Ok(event)
    }

    /// Starts the next segment at `next`, keeping the two traces that bracket it.
    fn reset(&mut self, next: Option<f64>) {
        self.cumulative_yaw = 0.0;
        self.peak_rate = 0.0;
        match next {
            Some(s) => {
                let keep_from = self
                    .traces
                    .iter()
                    .rposition(|t| t.trace.position <= s + 1e-9)
                    .unwrap_or(0);
                self.traces.drain(..keep_from);
                self.start = Some(s);
            }
            None => {
                self.traces.clear();
                self.start = None;
            }
        }
    }

    /// Index pair bracketing `p` and the blend weight of the upper trace.
    fn bracket(&self, p: f64) -> (usize, usize, f64) {
        let tr = &self.traces;
        let hi = tr.partition_point(|t| t.trace.position < p);
        if hi < tr.len() && (tr[hi].trace.position - p).abs() <= 1e-9 * p.abs().max(1.0) {
            return (hi, hi, 0.0);
        }
        if hi == 0 {
            return (0, 0, 0.0);
        }
        if hi >= tr.len() {
            return (tr.len() - 1, tr.len() - 1, 0.0);
        }
        let lo = hi - 1;
        let (a, b) = (tr[lo].trace.position, tr[hi].trace.position);
        if (b - a).abs() < 1e-12 {
            return (hi, hi, 0.0);
        }
        (lo, hi, (p - a) / (b - a))
    }

    fn time_at(&self, p: f64) -> f64 {
        if self.traces.is_empty() {
            return 0.0;
        }
        let (lo, hi, w) = self.bracket(p);
        (1.0 - w) * self.traces[lo].time + w * self.traces[hi].time
    }

    fn resample(&self, start: f64, cols: usize) -> Result<Radargram> {
        let first = &self.traces[0].trace;
        let rows = first.len();
        let mut data = DMatrix::zeros(rows, cols);
        for c in 0..cols {
            let p = start + c as f64 * self.cfg.spacing;
            let (lo, hi, w) = self.bracket(p);
            let (a, b) = (&self.traces[lo].trace.samples, &self.traces[hi].trace.samples);
            for r in 0..rows {
                data[(r, c)] = if lo == hi { a[r] } else { (1.0 - w) * a[r] + w * b[r] };
            }
        }
        Ok(Radargram::new(data, first.dt, self.cfg.spacing))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SalienceConfig {
    /// Pooling window, rows.
    pub window: usize,
    pub threshold: f64,
    /// Gate threshold on mean per-filter peak correlation.
    pub gate_threshold: f64,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        SalienceConfig { window: 8, threshold: 0.05, gate_threshold: 0.45 }
    }
}

impl SalienceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.threshold > 0.0) || !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::Config("salience: window >= 1, threshold > 0, gate threshold in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Population standard deviation of each row across columns.
pub fn row_std(img: &Radargram) -> Vec<f64> {
    let n = img.cols() as f64;
    img.data
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n;
            (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Maximum over non-overlapping row windows of the mean row standard
/// deviation. A trailing partial window is pooled over the rows it has.
pub fn salience(img: &Radargram, window: usize) -> f64 {
    if img.cols() == 0 {
        return 0.0;
    }
    row_std(img)
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .fold(0.0, f64::max)
}

pub fn is_salient(img: &Radargram, cfg: &SalienceConfig) -> bool {
    salience(img, cfg.window) >= cfg.threshold
}
