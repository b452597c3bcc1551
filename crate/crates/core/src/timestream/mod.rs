//! Photon timestamp streams.
//!
//! A stream is a header describing the sensor followed by a sequence of
//! acquisition cycles. Each cycle holds the detections registered inside one
//! fixed-length readout window; coincidences are only ever formed within a
//! cycle. Empty cycles may be omitted, so `cycle_index` is strictly increasing
//! but not necessarily contiguous.

mod binary;
mod csv;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use self::binary::{read_stream, write_stream, StreamReader, StreamWriter, FORMAT_VERSION, MAGIC, UNKNOWN_CYCLE_COUNT};
pub use self::csv::{read_csv, write_csv};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("not a SPK1 stream")]
    BadMagic,
    #[error("unsupported SPK1 version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unexpected end of stream at cycle {cycle}")]
    UnexpectedEof { cycle: u64 },
    #[error("unexpected end of stream in header")]
    TruncatedHeader,
    #[error("corrupt record {record} in cycle {cycle} at byte offset {offset}: {reason}")]
    CorruptRecord {
        cycle: u64,
        record: u64,
        offset: u64,
        reason: String,
    },
    #[error("corrupt cycle {cycle} at byte offset {offset}: {reason}")]
    CorruptCycle { cycle: u64, offset: u64, reason: String },
    #[error("stream declares {declared} cycles but {written} were written")]
    CycleCountMismatch { declared: u64, written: u64 },
    #[error("invalid cycle {cycle}, record {record}: {reason}")]
    Invalid { cycle: usize, record: usize, reason: String },
    #[error("csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometry and timing structure of one sensor half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub num_pixels: u16,
    pub cycle_period_ps: u64,
    pub tdc_bins_per_clock: u16,
    pub clock_period_ps: u32,
}

impl Default for SensorConfig {
    /// One half of a 512-pixel sensor, 400 MHz clock, 140 TDC bins and a
    /// 4 µs acquisition cycle.
    fn default() -> Self {
        SensorConfig {
            num_pixels: 256,
            cycle_period_ps: 4_000_000,
            tdc_bins_per_clock: 140,
            clock_period_ps: 2_500,
        }
    }
}

impl SensorConfig {
    pub fn mean_bin_width_ps(&self) -> f64 {
        self.clock_period_ps as f64 / self.tdc_bins_per_clock as f64
    }

    pub fn cycle_period_s(&self) -> f64 {
        self.cycle_period_ps as f64 * 1e-12
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_pixels < 2 {
            return Err(format!("num_pixels must be at least 2, got {}", self.num_pixels));
        }
        if self.tdc_bins_per_clock == 0 {
            return Err("tdc_bins_per_clock must be positive".into());
        }
        if self.clock_period_ps == 0 {
            return Err("clock_period_ps must be positive".into());
        }
        if self.cycle_period_ps <= self.clock_period_ps as u64 {
            return Err(format!(
                "cycle_period_ps ({}) must exceed clock_period_ps ({})",
                self.cycle_period_ps, self.clock_period_ps
            ));
        }
        Ok(())
    }
}

/// One photon detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestampRecord {
    pub pixel: u16,
    /// Intra-cycle time. In raw streams this is the coarse clock-cycle base and
    /// the fine position is carried by `raw_code`.
    pub time_ps: u64,
    pub raw_code: Option<u32>,
}

impl TimestampRecord {
    pub fn new(pixel: u16, time_ps: u64) -> Self {
        TimestampRecord { pixel, time_ps, raw_code: None }
    }

    pub fn raw(pixel: u16, time_ps: u64, raw_code: u32) -> Self {
        TimestampRecord { pixel, time_ps, raw_code: Some(raw_code) }
    }

    fn sort_key(&self) -> (u64, u16) {
        (self.time_ps, self.pixel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AcquisitionCycle {
    pub cycle_index: u64,
    /// Sorted by `time_ps`, ties broken by ascending pixel.
    pub records: Vec<TimestampRecord>,
}

impl AcquisitionCycle {
    pub fn new(cycle_index: u64, records: Vec<TimestampRecord>) -> Self {
        AcquisitionCycle { cycle_index, records }
    }

    /// Builds a cycle from unordered records, sorting them into canonical order.
    pub fn from_unsorted(cycle_index: u64, mut records: Vec<TimestampRecord>) -> Self {
        records.sort_by_key(|r| r.sort_key());
        AcquisitionCycle { cycle_index, records }
    }

    /// Checks the record invariants against `sensor`. On failure returns the
    /// offending record position and a reason.
    pub fn check(&self, sensor: &SensorConfig) -> Result<(), (usize, String)> {
        let mut prev: Option<(u64, u16)> = None;
        for (k, r) in self.records.iter().enumerate() {
            if r.pixel >= sensor.num_pixels {
                return Err((k, format!("pixel {} out of range (num_pixels {})", r.pixel, sensor.num_pixels)));
            }
            if r.time_ps >= sensor.cycle_period_ps {
                return Err((k, format!("time {} ps outside cycle of {} ps", r.time_ps, sensor.cycle_period_ps)));
            }
            let key = r.sort_key();
            if let Some(p) = prev {
                if key < p {
                    return Err((k, "records not sorted by (time_ps, pixel)".into()));
                }
            }
            prev = Some(key);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub version: u16,
    pub sensor: SensorConfig,
    pub metadata: BTreeMap<String, String>,
}

impl StreamHeader {
    pub fn new(sensor: SensorConfig) -> Self {
        StreamHeader { version: FORMAT_VERSION, sensor, metadata: BTreeMap::new() }
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

/// A fully materialised stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    pub header: StreamHeader,
    pub cycles: Vec<AcquisitionCycle>,
}

impl Stream {
    pub fn new(header: StreamHeader, cycles: Vec<AcquisitionCycle>) -> Self {
        Stream { header, cycles }
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.header.sensor
    }

    pub fn record_count(&self) -> usize {
        self.cycles.iter().map(|c| c.records.len()).sum()
    }

    /// Number of acquisition cycles spanned, counting omitted empty cycles.
    ///
    /// Uses the `acquired_cycles` metadata entry when present, otherwise one
    /// past the last stored cycle index (relative to `first_cycle`).
    pub fn acquired_cycles(&self) -> u64 {
        acquired_cycles(&self.header, self.cycles.last().map(|c| c.cycle_index))
    }

    /// Index of the first acquisition cycle covered by this stream.
    pub fn first_cycle(&self) -> u64 {
        first_cycle(&self.header)
    }

    /// Acquisition time covered by the stream.
    pub fn duration_s(&self) -> f64 {
        self.acquired_cycles() as f64 * self.header.sensor.cycle_period_s()
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        validate_cycles(&self.header.sensor, &self.cycles)
    }
}

/// Metadata key recording the number of acquisition cycles a stream spans.
pub const ACQUIRED_CYCLES_KEY: &str = "acquired_cycles";
/// Metadata key recording the index of the first cycle a stream spans.
pub const FIRST_CYCLE_KEY: &str = "first_cycle";

pub(crate) fn first_cycle(header: &StreamHeader) -> u64 {
    header.metadata.get(FIRST_CYCLE_KEY).and_then(|v| v.parse().ok()).unwrap_or(0)
}

/// Cycle span of a stream given its header and last stored cycle index.
pub fn acquired_cycles(header: &StreamHeader, last_index: Option<u64>) -> u64 {
    match header.metadata.get(ACQUIRED_CYCLES_KEY).and_then(|v| v.parse::<u64>().ok()) {
        Some(n) => n,
        None => last_index.map_or(0, |i| (i + 1).saturating_sub(first_cycle(header))),
    }
}

/// Checks every cycle and the strictly increasing cycle index.
pub fn validate_cycles(sensor: &SensorConfig, cycles: &[AcquisitionCycle]) -> Result<(), StreamError> {
    let mut prev: Option<u64> = None;
    for (ci, cycle) in cycles.iter().enumerate() {
        if let Some(p) = prev {
            if cycle.cycle_index <= p {
                return Err(StreamError::Invalid {
                    cycle: ci,
                    record: 0,
                    reason: format!("cycle_index {} not greater than previous {}", cycle.cycle_index, p),
                });
            }
        }
        prev = Some(cycle.cycle_index);
        cycle
            .check(sensor)
            .map_err(|(record, reason)| StreamError::Invalid { cycle: ci, record, reason })?;
    }
    Ok(())
}
