//! Two-pixel timestamp-difference histograms.
//!
//! The sign convention is `Δt = t_b − t_a` where `a` is the first pixel of the
//! pair. Only records of the same acquisition cycle are paired, and every
//! cross pair inside the window counts once. When per-pixel delays are
//! supplied, each time is corrected to `t − d[pixel]` before differencing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::timestream::{AcquisitionCycle, SensorConfig, Stream};

pub const DEFAULT_WINDOW_PS: f64 = 25_000.0;
pub const HISTOGRAM_SCHEMA_VERSION: u32 = 1;

/// Default bin width: three mean TDC bins of the default sensor.
pub fn default_bin_width_ps() -> f64 {
    3.0 * SensorConfig::default().mean_bin_width_ps()
}

#[derive(Debug, thiserror::Error)]
pub enum CoincidenceError {
    #[error("pair pixels must differ, got ({0}, {0})")]
    SamePixel(u16),
    #[error("pixel {pixel} out of range (num_pixels {num_pixels})")]
    PixelOutOfRange { pixel: u16, num_pixels: u16 },
    #[error("window and bin width must be positive and finite (window {window}, bin {bin})")]
    BadBinning { window: f64, bin: f64 },
    #[error("delay vector covers {got} pixels, stream has {need}")]
    DelayCoverage { got: usize, need: usize },
    #[error("cannot normalize: {0}")]
    Normalization(&'static str),
    #[error("histogram inconsistent: {0}")]
    Inconsistent(String),
    #[error("absolute time of cycle {0} overflows the event index")]
    IndexOverflow(u64),
}

/// Window half-width and bin width; bins tile `[−n·w/2, n·w/2)` symmetrically
/// about zero with `n = ceil(2W / w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub window_ps: f64,
    pub bin_width_ps: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Binning { window_ps: DEFAULT_WINDOW_PS, bin_width_ps: default_bin_width_ps() }
    }
}

impl Binning {
    pub fn new(window_ps: f64, bin_width_ps: f64) -> Result<Self, CoincidenceError> {
        let b = Binning { window_ps, bin_width_ps };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CoincidenceError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.window_ps) || !ok(self.bin_width_ps) || self.n_bins() > 50_000_000 {
            return Err(CoincidenceError::BadBinning { window: self.window_ps, bin: self.bin_width_ps });
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        (2.0 * self.window_ps / self.bin_width_ps).ceil() as usize
    }

    pub fn left_edge(&self) -> f64 {
        -self.half_span()
    }

    /// Half the width covered by the bins, `n · w / 2`, which is never less
    /// than the window.
    pub fn half_span(&self) -> f64 {
        self.n_bins() as f64 * self.bin_width_ps / 2.0
    }

    pub fn edges(&self) -> Vec<f64> {
        let left = self.left_edge();
        (0..=self.n_bins()).map(|i| left + i as f64 * self.bin_width_ps).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        let left = self.left_edge();
        (0..self.n_bins()).map(|i| left + (i as f64 + 0.5) * self.bin_width_ps).collect()
    }

    /// Bin of `dt`, or `None` outside `[−S, S]` with `S = half_span()`.
    /// Every bin has the full width, the outermost ones closed at `±S`.
    ///
    /// Negative values are binned as the mirror of their absolute value, so a
    /// value on a bin edge lands in mirrored bins for `dt` and `−dt`. For an
    /// even bin count, `dt = 0` lies on the central edge and goes to the upper
    /// of the two central bins.
    pub fn bin_index(&self, dt: f64) -> Option<usize> {
        if dt.is_nan() || dt.abs() > self.half_span() {
            return None;
        }
        let n = self.n_bins();
        let half = n as f64 / 2.0;
        let up = |x: f64| ((x / self.bin_width_ps + half).floor() as usize).min(n - 1);
        Some(if dt >= 0.0 { up(dt) } else { n - 1 - up(-dt) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub pixel_a: u16,
    pub pixel_b: u16,
    pub binning: Binning,
    pub counts: Vec<u64>,
    pub total_pairs: u64,
    /// Median of `counts` over bins, set by [`DeltaHistogram::normalize`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<Vec<f64>>,
}

impl DeltaHistogram {
    pub fn empty(pixel_a: u16, pixel_b: u16, binning: Binning) -> Self {
        DeltaHistogram {
            pixel_a,
            pixel_b,
            binning,
            counts: vec![0; binning.n_bins()],
            total_pairs: 0,
            median: None,
            normalized: None,
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.binning.centers()
    }

    pub fn record(&mut self, dt: f64) {
        if let Some(i) = self.binning.bin_index(dt) {
            self.counts[i] += 1;
            self.total_pairs += 1;
        }
    }

    /// Adds every in-window cross pair between the two time lists of one cycle.
    pub fn accumulate(&mut self, times_a: &[f64], times_b: &[f64]) {
        for &ta in times_a {
            for &tb in times_b {
                self.record(tb - ta);
            }
        }
    }

    pub fn merge(&mut self, other: &DeltaHistogram) {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_pairs += other.total_pairs;
        self.median = None;
        self.normalized = None;
    }

    /// Same histogram seen from the other pixel: pair swapped, bins reversed.
    pub fn mirrored(&self) -> DeltaHistogram {
        let mut counts = self.counts.clone();
        counts.reverse();
        DeltaHistogram {
            pixel_a: self.pixel_b,
            pixel_b: self.pixel_a,
            counts,
            median: None,
            normalized: None,
            ..self.clone()
        }
    }

    /// Divides every bin by the median bin count.
    pub fn normalize(mut self) -> Result<DeltaHistogram, CoincidenceError> {
        if self.counts.iter().all(|&c| c == 0) {
            return Err(CoincidenceError::Normalization("histogram is all zero"));
        }
        let values: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        let med = crate::rates::median(&values);
        if med <= 0.0 {
            return Err(CoincidenceError::Normalization("median bin count is zero"));
        }
        self.normalized = Some(values.iter().map(|v| v / med).collect());
        self.median = Some(med);
        Ok(self)
    }

    /// Values in the units a fit works in: normalized if available, else counts.
    pub fn values(&self) -> Vec<f64> {
        match &self.normalized {
            Some(v) => v.clone(),
            None => self.counts.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Poisson variance of [`values`](Self::values), floored at one count.
    pub fn variances(&self) -> Vec<f64> {
        let scale = match self.median {
            Some(m) if self.normalized.is_some() => 1.0 / (m * m),
            _ => 1.0,
        };
        self.counts.iter().map(|&c| (c.max(1)) as f64 * scale).collect()
    }

    pub fn check(&self) -> Result<(), CoincidenceError> {
        self.binning.validate()?;
        if self.counts.len() != self.binning.n_bins() {
            return Err(CoincidenceError::Inconsistent(format!(
                "{} bins stored, binning implies {}",
                self.counts.len(),
                self.binning.n_bins()
            )));
        }
        if self.counts.iter().sum::<u64>() != self.total_pairs {
            return Err(CoincidenceError::Inconsistent("bin counts do not sum to total_pairs".into()));
        }
        if let Some(n) = &self.normalized {
            if n.len() != self.counts.len() {
                return Err(CoincidenceError::Inconsistent("normalized length differs from counts".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": HISTOGRAM_SCHEMA_VERSION,
            "pixel_a": self.pixel_a,
            "pixel_b": self.pixel_b,
            "window_ps": self.binning.window_ps,
            "bin_width_ps": self.binning.bin_width_ps,
            "bin_edges_ps": self.binning.edges(),
            "counts": self.counts,
            "total_pairs": self.total_pairs,
            "median": self.median,
            "normalized": self.normalized,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<DeltaHistogram, CoincidenceError> {
        #[derive(Deserialize)]
        struct Raw {
            schema_version: u32,
            pixel_a: u16,
            pixel_b: u16,
            window_ps: f64,
            bin_width_ps: f64,
            counts: Vec<u64>,
            total_pairs: u64,
            #[serde(default)]
            median: Option<f64>,
            #[serde(default)]
            normalized: Option<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_value(value.clone())
            .map_err(|e| CoincidenceError::Inconsistent(format!("bad histogram json: {e}")))?;
        if raw.schema_version != HISTOGRAM_SCHEMA_VERSION {
            return Err(CoincidenceError::Inconsistent(format!("unsupported schema_version {}", raw.schema_version)));
        }
        let h = DeltaHistogram {
            pixel_a: raw.pixel_a,
            pixel_b: raw.pixel_b,
            binning: Binning { window_ps: raw.window_ps, bin_width_ps: raw.bin_width_ps },
            counts: raw.counts,
            total_pairs: raw.total_pairs,
            median: raw.median,
            normalized: raw.normalized,
        };
        h.check()?;
        Ok(h)
    }
}

fn check_pair(sensor: &SensorConfig, a: u16, b: u16, delays: Option<&[f64]>) -> Result<(), CoincidenceError> {
    if a == b {
        return Err(CoincidenceError::SamePixel(a));
    }
    for p in [a, b] {
        if p >= sensor.num_pixels {
            return Err(CoincidenceError::PixelOutOfRange { pixel: p, num_pixels: sensor.num_pixels });
        }
    }
    if let Some(d) = delays {
        if d.len() < sensor.num_pixels as usize {
            return Err(CoincidenceError::DelayCoverage { got: d.len(), need: sensor.num_pixels as usize });
        }
    }
    Ok(())
}

#[inline]
fn corrected(time_ps: u64, pixel: u16, delays: Option<&[f64]>) -> f64 {
    match delays {
        Some(d) => time_ps as f64 - d[pixel as usize],
        None => time_ps as f64,
    }
}

/// Accumulates one pair over a cycle source, one cycle at a time.
#[derive(Debug, Clone)]
pub struct HistogramBuilder<'d> {
    hist: DeltaHistogram,
    delays: Option<&'d [f64]>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

impl<'d> HistogramBuilder<'d> {
    pub fn new(
        sensor: &SensorConfig,
        pair: (u16, u16),
        binning: Binning,
        delays: Option<&'d [f64]>,
    ) -> Result<Self, CoincidenceError> {
        check_pair(sensor, pair.0, pair.1, delays)?;
        binning.validate()?;
        Ok(HistogramBuilder {
            hist: DeltaHistogram::empty(pair.0, pair.1, binning),
            delays,
            buf_a: Vec::new(),
            buf_b: Vec::new(),
        })
    }

    pub fn push_cycle(&mut self, cycle: &AcquisitionCycle) {
        let (a, b) = (self.hist.pixel_a, self.hist.pixel_b);
        self.buf_a.clear();
        self.buf_b.clear();
        for r in &cycle.records {
            if r.pixel == a {
                self.buf_a.push(corrected(r.time_ps, a, self.delays));
            } else if r.pixel == b {
                self.buf_b.push(corrected(r.time_ps, b, self.delays));
            }
        }
        if !self.buf_a.is_empty() && !self.buf_b.is_empty() {
            self.hist.accumulate(&self.buf_a, &self.buf_b);
        }
    }

    pub fn finish(self) -> DeltaHistogram {
        self.hist
    }
}

/// Histogram of `Δt = t_b − t_a` for `pair = (a, b)` over a materialized stream.
pub fn build_histogram(
    stream: &Stream,
    pair: (u16, u16),
    binning: Binning,
    delays: Option<&[f64]>,
) -> Result<DeltaHistogram, CoincidenceError> {
    let mut b = HistogramBuilder::new(stream.sensor(), pair, binning, delays)?;
    for c in &stream.cycles {
        b.push_cycle(c);
    }
    Ok(b.finish())
}

/// Per-pixel sorted event times for fast repeated pair queries.
///
/// Each event is stored as its absolute time `cycle_index · cycle_period +
/// time_ps`, which orders events by cycle and then by time.
#[derive(Debug, Clone)]
pub struct EventIndex {
    sensor: SensorConfig,
    events: Vec<Vec<u64>>,
    last_cycle: Option<u64>,
}

impl EventIndex {
    pub fn new(sensor: SensorConfig) -> Self {
        EventIndex { sensor, events: vec![Vec::new(); sensor.num_pixels as usize], last_cycle: None }
    }

    pub fn from_stream(stream: &Stream) -> Result<Self, CoincidenceError> {
        let mut idx = EventIndex::new(*stream.sensor());
        for c in &stream.cycles {
            idx.push_cycle(c)?;
        }
        Ok(idx)
    }

    /// Appends a cycle. Cycles must arrive in increasing index order.
    pub fn push_cycle(&mut self, cycle: &AcquisitionCycle) -> Result<(), CoincidenceError> {
        if let Some(last) = self.last_cycle {
            if cycle.cycle_index <= last {
                return Err(CoincidenceError::Inconsistent(format!(
                    "cycle {} pushed after cycle {last}",
                    cycle.cycle_index
                )));
            }
        }
        let base = cycle
            .cycle_index
            .checked_mul(self.sensor.cycle_period_ps)
            .filter(|b| b.checked_add(self.sensor.cycle_period_ps).is_some_and(|e| e < i64::MAX as u64))
            .ok_or(CoincidenceError::IndexOverflow(cycle.cycle_index))?;
        for r in &cycle.records {
            if let Some(list) = self.events.get_mut(r.pixel as usize) {
                list.push(base + r.time_ps);
            }
        }
        self.last_cycle = Some(cycle.cycle_index);
        Ok(())
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    pub fn count(&self, pixel: u16) -> u64 {
        self.events.get(pixel as usize).map_or(0, |v| v.len() as u64)
    }

    pub fn counts(&self) -> Vec<u64> {
        self.events.iter().map(|v| v.len() as u64).collect()
    }

    pub fn total(&self) -> u64 {
        self.events.iter().map(|v| v.len() as u64).sum()
    }

    /// Histogram for one pair; identical to [`build_histogram`] on the same data.
    pub fn histogram(
        &self,
        pair: (u16, u16),
        binning: Binning,
        delays: Option<&[f64]>,
    ) -> Result<DeltaHistogram, CoincidenceError> {
        let (a, b) = pair;
        check_pair(&self.sensor, a, b, delays)?;
        binning.validate()?;
        let mut hist = DeltaHistogram::empty(a, b, binning);
        let period = self.sensor.cycle_period_ps;
        let (da, db) = delays.map_or((0.0, 0.0), |d| (d[a as usize], d[b as usize]));
        // Raw-difference search range, padded so float rounding cannot exclude
        // a pair the exact check below would accept.
        let shift = db - da;
        let lo = (shift - binning.half_span()).floor() as i64 - 1;
        let hi = (shift + binning.half_span()).ceil() as i64 + 1;
        let ev_a = &self.events[a as usize];
        let ev_b = &self.events[b as usize];
        let mut start = 0usize;
        for &xa in ev_a {
            let cycle = xa / period;
            let ta = (xa % period) as f64 - da;
            let from = (xa as i64 + lo).max((cycle * period) as i64);
            let to = (xa as i64 + hi).min(((cycle + 1) * period) as i64 - 1);
            if from > to {
                continue;
            }
            while start < ev_b.len() && (ev_b[start] as i64) < from {
                start += 1;
            }
            let mut k = start;
            while k < ev_b.len() && (ev_b[k] as i64) <= to {
                let tb = (ev_b[k] % period) as f64 - db;
                hist.record(tb - ta);
                k += 1;
            }
        }
        Ok(hist)
    }

    /// Histograms for many pairs, built in parallel.
    pub fn histograms(
        &self,
        pairs: &[(u16, u16)],
        binning: Binning,
        delays: Option<&[f64]>,
    ) -> Result<Vec<DeltaHistogram>, CoincidenceError> {
        pairs.par_iter().map(|&p| self.histogram(p, binning, delays)).collect()
    }
}
