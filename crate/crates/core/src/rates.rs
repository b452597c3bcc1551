//! Per-pixel count rates, median DCR and hot-pixel detection.

use serde::{Deserialize, Serialize};

use crate::timestream::{AcquisitionCycle, Stream, StreamHeader, ACQUIRED_CYCLES_KEY, FIRST_CYCLE_KEY};

pub const DEFAULT_HOT_THRESHOLD_CPS: f64 = 1000.0;
pub const RATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RateError {
    #[error("acquisition duration must be positive, got {0} s")]
    NonPositiveDuration(f64),
    #[error("cannot split {cycles} cycles into {n} subsets")]
    TooManySubsets { n: usize, cycles: u64 },
    #[error("subset count must be positive")]
    ZeroSubsets,
}

/// Hit counter over cycles; partial counters merge by addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateCounter {
    counts: Vec<u64>,
}

impl RateCounter {
    pub fn new(num_pixels: u16) -> Self {
        RateCounter { counts: vec![0; num_pixels as usize] }
    }

    pub fn push_cycle(&mut self, cycle: &AcquisitionCycle) {
        for r in &cycle.records {
            if let Some(c) = self.counts.get_mut(r.pixel as usize) {
                *c += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &RateCounter) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self, duration_s: f64, hot_threshold_cps: f64) -> Result<RateReport, RateError> {
        RateReport::from_counts(self.counts.clone(), duration_s, hot_threshold_cps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotPixel {
    pub pixel: u16,
    pub rate_cps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub label: String,
    pub first_cycle: u64,
    pub cycles: u64,
    pub report: RateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub duration_s: f64,
    pub counts: Vec<u64>,
    pub rates_cps: Vec<f64>,
    pub median_rate_cps: f64,
    pub hot_threshold_cps: f64,
    /// Pixels at or above the threshold, highest rate first.
    pub hot_pixels: Vec<HotPixel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_reports: Option<Vec<SubsetReport>>,
}

impl RateReport {
    pub fn from_counts(counts: Vec<u64>, duration_s: f64, hot_threshold_cps: f64) -> Result<Self, RateError> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(RateError::NonPositiveDuration(duration_s));
        }
        let rates_cps: Vec<f64> = counts.iter().map(|&c| c as f64 / duration_s).collect();
        let median_rate_cps = median(&rates_cps);
        let mut hot_pixels: Vec<HotPixel> = rates_cps
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= hot_threshold_cps)
            .map(|(p, &r)| HotPixel { pixel: p as u16, rate_cps: r })
            .collect();
        hot_pixels.sort_by(|a, b| b.rate_cps.total_cmp(&a.rate_cps).then(a.pixel.cmp(&b.pixel)));
        Ok(RateReport {
            duration_s,
            counts,
            rates_cps,
            median_rate_cps,
            hot_threshold_cps,
            hot_pixels,
            subset_reports: None,
        })
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Median of a slice; mean of the two central values for even lengths, 0 for
/// an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rates over a whole stream. Without an explicit `wall_duration_s` the
/// duration is the acquired cycle span times the cycle period.
pub fn compute_rates(stream: &Stream, wall_duration_s: Option<f64>, hot_threshold_cps: f64) -> Result<RateReport, RateError> {
    let mut counter = RateCounter::new(stream.sensor().num_pixels);
    for c in &stream.cycles {
        counter.push_cycle(c);
    }
    counter.report(wall_duration_s.unwrap_or_else(|| stream.duration_s()), hot_threshold_cps)
}

/// Contiguous half-open cycle-index ranges splitting `[first, first + span)`
/// into `n` parts whose lengths differ by at most one.
pub fn subset_ranges(first: u64, span: u64, n: usize) -> Result<Vec<(u64, u64)>, RateError> {
    if n == 0 {
        return Err(RateError::ZeroSubsets);
    }
    if n as u64 > span {
        return Err(RateError::TooManySubsets { n, cycles: span });
    }
    let n64 = n as u64;
    let (base, extra) = (span / n64, span % n64);
    let mut out = Vec::with_capacity(n);
    let mut start = first;
    for k in 0..n64 {
        let len = base + u64::from(k < extra);
        out.push((start, start + len));
        start += len;
    }
    Ok(out)
}

/// Splits a stream into `n` contiguous sub-streams of (nearly) equal cycle span.
pub fn split_subsets(stream: &Stream, n: usize) -> Result<Vec<Stream>, RateError> {
    let ranges = subset_ranges(stream.first_cycle(), stream.acquired_cycles(), n)?;
    let mut out = Vec::with_capacity(n);
    let mut cycles = stream.cycles.iter().peekable();
    for &(lo, hi) in &ranges {
        let mut part = Vec::new();
        while let Some(c) = cycles.next_if(|c| c.cycle_index < hi) {
            debug_assert!(c.cycle_index >= lo);
            part.push(c.clone());
        }
        out.push(Stream::new(subset_header(&stream.header, lo, hi), part));
    }
    Ok(out)
}

fn subset_header(parent: &StreamHeader, lo: u64, hi: u64) -> StreamHeader {
    parent
        .clone()
        .with_metadata(FIRST_CYCLE_KEY, lo.to_string())
        .with_metadata(ACQUIRED_CYCLES_KEY, (hi - lo).to_string())
}

/// Whole-stream report with per-subset reports attached.
pub fn compute_rates_with_subsets(stream: &Stream, n: usize, hot_threshold_cps: f64) -> Result<RateReport, RateError> {
    let mut report = compute_rates(stream, None, hot_threshold_cps)?;
    let subsets = split_subsets(stream, n)?;
    let mut reports = Vec::with_capacity(n);
    for (k, s) in subsets.iter().enumerate() {
        reports.push(SubsetReport {
            label: format!("subset {}/{}", k + 1, n),
            first_cycle: s.first_cycle(),
            cycles: s.acquired_cycles(),
            report: compute_rates(s, None, hot_threshold_cps)?,
        });
    }
    report.subset_reports = Some(reports);
    Ok(report)
}

/// Streaming counterpart of [`compute_rates_with_subsets`] for cycle sources
/// too large to hold in memory. The cycle span must be known in advance.
pub struct SubsetRateCounter {
    ranges: Vec<(u64, u64)>,
    counters: Vec<RateCounter>,
    period_s: f64,
}

impl SubsetRateCounter {
    pub fn new(num_pixels: u16, cycle_period_s: f64, first: u64, span: u64, n: usize) -> Result<Self, RateError> {
        let ranges = subset_ranges(first, span, n)?;
        Ok(SubsetRateCounter { counters: vec![RateCounter::new(num_pixels); n], ranges, period_s: cycle_period_s })
    }

    pub fn push_cycle(&mut self, cycle: &AcquisitionCycle) {
        let k = self.ranges.partition_point(|&(_, hi)| hi <= cycle.cycle_index);
        if let Some(c) = self.counters.get_mut(k) {
            c.push_cycle(cycle);
        }
    }

    pub fn finish(self, hot_threshold_cps: f64) -> Result<RateReport, RateError> {
        let n = self.ranges.len();
        let mut total = RateCounter::new(self.counters[0].counts.len() as u16);
        let mut reports = Vec::with_capacity(n);
        for (k, (c, &(lo, hi))) in self.counters.iter().zip(&self.ranges).enumerate() {
            total.merge(c);
            reports.push(SubsetReport {
                label: format!("subset {}/{}", k + 1, n),
                first_cycle: lo,
                cycles: hi - lo,
                report: c.report((hi - lo) as f64 * self.period_s, hot_threshold_cps)?,
            });
        }
        let span = self.ranges.last().unwrap().1 - self.ranges[0].0;
        let mut report = total.report(span as f64 * self.period_s, hot_threshold_cps)?;
        report.subset_reports = Some(reports);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timestream::{SensorConfig, TimestampRecord};

    fn header() -> StreamHeader {
        StreamHeader::new(SensorConfig::default())
    }

    #[test]
    fn single_hot_pixel() {
        let mut counts = vec![0u64; 256];
        counts[42] = 5_000;
        let r = RateReport::from_counts(counts, 5.0, DEFAULT_HOT_THRESHOLD_CPS).unwrap();
        assert_eq!(r.hot_pixels, vec![HotPixel { pixel: 42, rate_cps: 1000.0 }]);
        assert_eq!(r.median_rate_cps, 0.0);
    }

    #[test]
    fn zero_duration_rejected() {
        assert!(matches!(RateReport::from_counts(vec![1, 2], 0.0, 1.0), Err(RateError::NonPositiveDuration(_))));
    }

    #[test]
    fn hot_pixels_sorted_descending() {
        let r = RateReport::from_counts(vec![10, 3000, 2000, 5000], 1.0, 1000.0).unwrap();
        let order: Vec<u16> = r.hot_pixels.iter().map(|h| h.pixel).collect();
        assert_eq!(order, vec![3, 1, 2]);
        assert_eq!(r.median_rate_cps, 2500.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }

    fn dense(n: u64) -> Stream {
        let cycles = (0..n).map(|i| AcquisitionCycle::new(i, vec![TimestampRecord::new((i % 3) as u16, 10)])).collect();
        Stream::new(header(), cycles)
    }

    #[test]
    fn split_identity_and_singletons() {
        let s = dense(7);
        let one = split_subsets(&s, 1).unwrap();
        assert_eq!(one[0].cycles, s.cycles);
        assert_eq!(one[0].acquired_cycles(), 7);
        let each = split_subsets(&s, 7).unwrap();
        assert!(each.iter().all(|p| p.cycles.len() == 1 && p.acquired_cycles() == 1));
        assert!(matches!(split_subsets(&s, 8), Err(RateError::TooManySubsets { n: 8, cycles: 7 })));
    }

    #[test]
    fn split_sizes_differ_by_at_most_one() {
        let s = dense(20);
        let parts = split_subsets(&s, 6).unwrap();
        let sizes: Vec<u64> = parts.iter().map(|p| p.acquired_cycles()).collect();
        assert_eq!(sizes.iter().sum::<u64>(), 20);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let flat: Vec<_> = parts.iter().flat_map(|p| p.cycles.clone()).collect();
        assert_eq!(flat, s.cycles);
    }

    #[test]
    fn sparse_stream_splits_by_index_span() {
        let cycles = vec![AcquisitionCycle::new(0, vec![]), AcquisitionCycle::new(99, vec![])];
        let s = Stream::new(header(), cycles);
        let parts = split_subsets(&s, 2).unwrap();
        assert_eq!(parts[0].cycles.len(), 1);
        assert_eq!(parts[1].cycles[0].cycle_index, 99);
        assert_eq!(parts[1].first_cycle(), 50);
        assert_eq!(parts[1].acquired_cycles(), 50);
    }

    #[test]
    fn streaming_subsets_match_in_memory() {
        let s = dense(30);
        let a = compute_rates_with_subsets(&s, 4, 1.0).unwrap();
        let mut c = SubsetRateCounter::new(256, s.sensor().cycle_period_s(), 0, 30, 4).unwrap();
        for cy in &s.cycles {
            c.push_cycle(cy);
        }
        let b = c.finish(1.0).unwrap();
        assert_eq!(a.counts, b.counts);
        let sa: Vec<_> = a.subset_reports.unwrap().into_iter().map(|r| r.report.counts).collect();
        let sb: Vec<_> = b.subset_reports.unwrap().into_iter().map(|r| r.report.counts).collect();
        assert_eq!(sa, sb);
    }
}
