//! TDC nonlinearity calibration by the code-density method.
//!
//! Under temporally uniform illumination the number of hits landing in a TDC
//! code is proportional to that code's true width, so per-pixel histograms of
//! raw codes give a look-up table of bin widths and offsets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::timestream::{AcquisitionCycle, SensorConfig, TimestampRecord};

/// Minimum hits per pixel for its LUT to be considered usable.
pub const DEFAULT_MIN_COUNTS: u64 = 10_000;
/// A pixel with more than this fraction of empty codes is unusable.
pub const MAX_EMPTY_CODE_FRACTION: f64 = 0.10;
/// Pseudo-count given to empty codes of an otherwise usable pixel so every
/// width stays positive.
const EMPTY_CODE_PSEUDO_COUNT: f64 = 0.5;
pub const LUT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LutError {
    #[error("cycle {cycle_index}: record for pixel {pixel} has no raw TDC code")]
    MissingRawCode { cycle_index: u64, pixel: u16 },
    #[error("cycle {cycle_index}: pixel {pixel} raw code {code} outside [0, {bins})")]
    CodeOutOfRange { cycle_index: u64, pixel: u16, code: u32, bins: u16 },
    #[error("cycle {cycle_index}: pixel {pixel} out of range")]
    PixelOutOfRange { cycle_index: u64, pixel: u16 },
    #[error("uncalibrated pixels: {0:?}")]
    Uncalibrated(Vec<u16>),
    #[error("look-up table was built for a different sensor")]
    SensorMismatch,
    #[error("invalid look-up table: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelFlag {
    /// Fewer hits than the configured minimum.
    LowCounts { total: u64 },
    /// Too many codes never hit (includes the all-in-one-code degenerate case).
    EmptyCodes { empty: u32 },
}

/// Per-pixel raw-code histograms, accumulated cycle by cycle.
#[derive(Debug, Clone)]
pub struct CodeDensity {
    sensor: SensorConfig,
    counts: Vec<u64>,
}

impl CodeDensity {
    pub fn new(sensor: SensorConfig) -> Self {
        let n = sensor.num_pixels as usize * sensor.tdc_bins_per_clock as usize;
        CodeDensity { sensor, counts: vec![0; n] }
    }

    pub fn push_cycle(&mut self, cycle: &AcquisitionCycle) -> Result<(), LutError> {
        let bins = self.sensor.tdc_bins_per_clock;
        for r in &cycle.records {
            let code = r.raw_code.ok_or(LutError::MissingRawCode { cycle_index: cycle.cycle_index, pixel: r.pixel })?;
            if r.pixel >= self.sensor.num_pixels {
                return Err(LutError::PixelOutOfRange { cycle_index: cycle.cycle_index, pixel: r.pixel });
            }
            if code >= bins as u32 {
                return Err(LutError::CodeOutOfRange { cycle_index: cycle.cycle_index, pixel: r.pixel, code, bins });
            }
            self.counts[r.pixel as usize * bins as usize + code as usize] += 1;
        }
        Ok(())
    }

    /// Combines two partial accumulations over the same sensor.
    pub fn merge(mut self, other: &CodeDensity) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn pixel_counts(&self, pixel: u16) -> &[u64] {
        let bins = self.sensor.tdc_bins_per_clock as usize;
        &self.counts[pixel as usize * bins..(pixel as usize + 1) * bins]
    }

    pub fn finish(&self, min_counts: u64) -> TdcLut {
        let clock = self.sensor.clock_period_ps as f64;
        let bins = self.sensor.tdc_bins_per_clock as usize;
        let mut pixels = Vec::with_capacity(self.sensor.num_pixels as usize);
        let mut flags = BTreeMap::new();
        for p in 0..self.sensor.num_pixels {
            let counts = self.pixel_counts(p);
            let total: u64 = counts.iter().sum();
            let empty = counts.iter().filter(|&&c| c == 0).count();
            if total < min_counts {
                flags.insert(p, PixelFlag::LowCounts { total });
                pixels.push(None);
                continue;
            }
            if empty as f64 > MAX_EMPTY_CODE_FRACTION * bins as f64 {
                flags.insert(p, PixelFlag::EmptyCodes { empty: empty as u32 });
                pixels.push(None);
                continue;
            }
            let weights: Vec<f64> = counts
                .iter()
                .map(|&c| if c == 0 { EMPTY_CODE_PSEUDO_COUNT } else { c as f64 })
                .collect();
            let norm: f64 = weights.iter().sum();
            let widths = weights.iter().map(|w| clock * w / norm).collect();
            pixels.push(Some(PixelLut::from_widths(widths)));
        }
        TdcLut { sensor: self.sensor, pixels, flags, counts_per_pixel: self.totals() }
    }

    fn totals(&self) -> Vec<u64> {
        (0..self.sensor.num_pixels).map(|p| self.pixel_counts(p).iter().sum()).collect()
    }
}

/// Bin widths and start offsets of one pixel's TDC.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLut {
    widths: Vec<f64>,
    offsets: Vec<f64>,
}

impl PixelLut {
    pub fn from_widths(widths: Vec<f64>) -> Self {
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0.0;
        for w in &widths {
            offsets.push(acc);
            acc += w;
        }
        PixelLut { widths, offsets }
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Position of `code` inside the clock period: bin start plus half width.
    pub fn midpoint(&self, code: usize) -> f64 {
        self.offsets[code] + 0.5 * self.widths[code]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdcLut {
    pub sensor: SensorConfig,
    /// `None` for pixels that could not be calibrated.
    pub pixels: Vec<Option<PixelLut>>,
    pub flags: BTreeMap<u16, PixelFlag>,
    pub counts_per_pixel: Vec<u64>,
}

/// Builds a look-up table from a raw stream.
pub fn build_lut<'a, I>(cycles: I, sensor: &SensorConfig, min_counts: u64) -> Result<TdcLut, LutError>
where
    I: IntoIterator<Item = &'a AcquisitionCycle>,
{
    let mut acc = CodeDensity::new(*sensor);
    for c in cycles {
        acc.push_cycle(c)?;
    }
    Ok(acc.finish(min_counts))
}

impl TdcLut {
    /// A LUT with every bin at the nominal width, for all pixels.
    pub fn uniform(sensor: SensorConfig) -> Self {
        let w = sensor.mean_bin_width_ps();
        let px = PixelLut::from_widths(vec![w; sensor.tdc_bins_per_clock as usize]);
        TdcLut {
            sensor,
            pixels: vec![Some(px); sensor.num_pixels as usize],
            flags: BTreeMap::new(),
            counts_per_pixel: vec![0; sensor.num_pixels as usize],
        }
    }

    pub fn pixel(&self, pixel: u16) -> Option<&PixelLut> {
        self.pixels.get(pixel as usize).and_then(|p| p.as_ref())
    }

    pub fn unusable_pixels(&self) -> Vec<u16> {
        self.flags.keys().copied().collect()
    }

    /// Converts one raw cycle to calibrated picoseconds. Records are re-sorted
    /// because per-pixel tables may reorder hits within a clock period.
    pub fn apply_cycle(&self, cycle: &AcquisitionCycle) -> Result<AcquisitionCycle, LutError> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(cycle.records.len());
        for r in &cycle.records {
            let code = r.raw_code.ok_or(LutError::MissingRawCode { cycle_index: cycle.cycle_index, pixel: r.pixel })?;
            let Some(px) = self.pixel(r.pixel) else {
                missing.push(r.pixel);
                continue;
            };
            if code as usize >= px.widths.len() {
                return Err(LutError::CodeOutOfRange {
                    cycle_index: cycle.cycle_index,
                    pixel: r.pixel,
                    code,
                    bins: self.sensor.tdc_bins_per_clock,
                });
            }
            let t = r.time_ps as f64 + px.midpoint(code as usize);
            let t = (t.round() as u64).min(self.sensor.cycle_period_ps - 1);
            out.push(TimestampRecord::new(r.pixel, t));
        }
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(LutError::Uncalibrated(missing));
        }
        Ok(AcquisitionCycle::from_unsorted(cycle.cycle_index, out))
    }

    /// Converts a raw stream. Fails listing every uncalibrated pixel present.
    pub fn apply(&self, cycles: &[AcquisitionCycle]) -> Result<Vec<AcquisitionCycle>, LutError> {
        let mut missing: Vec<u16> = Vec::new();
        for c in cycles {
            for r in &c.records {
                if self.pixel(r.pixel).is_none() {
                    missing.push(r.pixel);
                }
            }
        }
        if !missing.is_empty() {
            missing.sort_unstable();
            missing.dedup();
            return Err(LutError::Uncalibrated(missing));
        }
        cycles.iter().map(|c| self.apply_cycle(c)).collect()
    }

    pub fn to_json(&self) -> LutJson {
        LutJson {
            schema_version: LUT_SCHEMA_VERSION,
            sensor: self.sensor,
            widths_ps: self
                .pixels
                .iter()
                .enumerate()
                .filter_map(|(p, px)| px.as_ref().map(|px| (p as u16, px.widths.clone())))
                .collect(),
            unusable: self.flags.clone(),
            counts_per_pixel: self.counts_per_pixel.clone(),
        }
    }

    pub fn from_json(json: LutJson) -> Result<Self, LutError> {
        if json.schema_version != LUT_SCHEMA_VERSION {
            return Err(LutError::Invalid(format!("unsupported schema_version {}", json.schema_version)));
        }
        let sensor = json.sensor;
        sensor.validate().map_err(LutError::Invalid)?;
        let mut pixels = vec![None; sensor.num_pixels as usize];
        let clock = sensor.clock_period_ps as f64;
        for (p, widths) in json.widths_ps {
            if p >= sensor.num_pixels {
                return Err(LutError::Invalid(format!("pixel {p} out of range")));
            }
            if widths.len() != sensor.tdc_bins_per_clock as usize {
                return Err(LutError::Invalid(format!("pixel {p}: expected {} widths", sensor.tdc_bins_per_clock)));
            }
            if widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(LutError::Invalid(format!("pixel {p}: non-positive width")));
            }
            let sum: f64 = widths.iter().sum();
            if ((sum - clock) / clock).abs() > 1e-6 {
                return Err(LutError::Invalid(format!("pixel {p}: widths sum to {sum} ps, expected {clock}")));
            }
            pixels[p as usize] = Some(PixelLut::from_widths(widths));
        }
        let mut counts_per_pixel = json.counts_per_pixel;
        counts_per_pixel.resize(sensor.num_pixels as usize, 0);
        Ok(TdcLut { sensor, pixels, flags: json.unusable, counts_per_pixel })
    }

    pub fn check_sensor(&self, sensor: &SensorConfig) -> Result<(), LutError> {
        if &self.sensor == sensor {
            Ok(())
        } else {
            Err(LutError::SensorMismatch)
        }
    }
}

/// Persisted form: `{pixel: [width_ps; bins]}` plus the sensor it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutJson {
    pub schema_version: u32,
    pub sensor: SensorConfig,
    pub widths_ps: BTreeMap<u16, Vec<f64>>,
    #[serde(default)]
    pub unusable: BTreeMap<u16, PixelFlag>,
    #[serde(default)]
    pub counts_per_pixel: Vec<u64>,
}

/// Uniformity test of a calibrated pixel against fresh raw data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flatness {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// χ² test that converted times of `pixel` have a flat density, i.e. that the
/// hits per code are proportional to the table's widths.
///
/// `lut_sample` is the number of hits the table was built from; its own
/// multinomial noise is folded into the variance. Pass 0 for an exact table.
pub fn flatness_test(lut: &PixelLut, code_counts: &[u64], lut_sample: u64) -> Flatness {
    let n: u64 = code_counts.iter().sum();
    let n = n as f64;
    let clock: f64 = lut.widths.iter().sum();
    let inflation = if lut_sample > 0 { 1.0 + n / lut_sample as f64 } else { 1.0 };
    let chi2: f64 = code_counts
        .iter()
        .zip(&lut.widths)
        .map(|(&c, &w)| {
            let p = w / clock;
            let expected = n * p;
            let var = n * p * (1.0 - p) * inflation;
            (c as f64 - expected).powi(2) / var
        })
        .sum();
    let dof = code_counts.len() - 1;
    let p_value = ChiSquared::new(dof as f64).map(|d| d.sf(chi2)).unwrap_or(f64::NAN);
    Flatness { chi2, dof, p_value }
}
