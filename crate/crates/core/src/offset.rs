//! Per-pixel delay calibration from adjacent-pixel cross-talk peaks.
//!
//! A CT photon is detected at effectively the same instant as its source, so
//! the CT peak of the pair `(i, i+1)` sits at `Δt = t_{i+1} − t_i = d_{i+1} − d_i`.
//! The measured offset is `off_{i,i+1} = d_i − d_{i+1} = −μ`. The chain of
//! adjacent offsets plus the zero-mean constraint determines every delay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::{Binning, CoincidenceError, DeltaHistogram, EventIndex};
use crate::peakfit::{fit_gaussian, FitData, FitOptions};
use crate::timestream::{SensorConfig, Stream};

pub const DELAYS_SCHEMA_VERSION: u32 = 1;
/// Invalid-pair fraction above which a calibration is reported as degraded.
pub const MAX_INVALID_FRACTION: f64 = 0.20;

#[derive(Debug, thiserror::Error)]
pub enum OffsetError {
    #[error("no valid offset measurements")]
    NoValidMeasurements,
    #[error("measurement ({i}, {j}) is not an adjacent pair inside {num_pixels} pixels")]
    NotAdjacent { i: u16, j: u16, num_pixels: u16 },
    #[error("delay vector has {got} entries, stream has {need} pixels")]
    Coverage { got: usize, need: usize },
    #[error("bad delays json: {0}")]
    Json(String),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetMeasurement {
    pub i: u16,
    pub j: u16,
    /// `d_i − d_j`.
    pub offset_ps: f64,
    pub sigma_ps: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetReport {
    pub measurements: Vec<OffsetMeasurement>,
    pub invalid: usize,
    /// More than [`MAX_INVALID_FRACTION`] of the pairs failed.
    pub degraded: bool,
}

/// Fits the CT peak of every adjacent pair. The histogram window must cover
/// the largest expected delay difference.
pub fn measure_offsets(index: &EventIndex, binning: Binning) -> Result<OffsetReport, OffsetError> {
    binning.validate()?;
    let n = index.sensor().num_pixels;
    let measurements: Vec<OffsetMeasurement> = (0..n - 1)
        .into_par_iter()
        .map(|i| -> Result<OffsetMeasurement, OffsetError> {
            let h = index.histogram((i, i + 1), binning, None)?;
            Ok(offset_from_histogram(&h))
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(measurements))
}

/// Same as [`measure_offsets`] for a materialized stream.
pub fn measure_offsets_stream(stream: &Stream, binning: Binning) -> Result<OffsetReport, OffsetError> {
    measure_offsets(&EventIndex::from_stream(stream)?, binning)
}

fn summarize(measurements: Vec<OffsetMeasurement>) -> OffsetReport {
    let invalid = measurements.iter().filter(|m| !m.valid).count();
    let degraded = invalid as f64 > MAX_INVALID_FRACTION * measurements.len() as f64;
    if degraded {
        log::warn!("{invalid} of {} adjacent pairs have no usable offset", measurements.len());
    }
    OffsetReport { measurements, invalid, degraded }
}

/// Offset from one adjacent-pair histogram; invalid without a significant peak.
pub fn offset_from_histogram(h: &DeltaHistogram) -> OffsetMeasurement {
    let fit = FitData::from_histogram(h).ok().and_then(|d| fit_gaussian(&d, &FitOptions::default()).ok());
    match fit {
        Some(f) if f.is_significant() && f.peak.mu_err.is_finite() => OffsetMeasurement {
            i: h.pixel_a,
            j: h.pixel_b,
            offset_ps: -f.peak.mu,
            sigma_ps: f.peak.mu_err,
            valid: true,
        },
        _ => OffsetMeasurement { i: h.pixel_a, j: h.pixel_b, offset_ps: 0.0, sigma_ps: f64::INFINITY, valid: false },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayVector {
    pub delays_ps: Vec<f64>,
    pub provenance: Vec<OffsetMeasurement>,
    /// Adjacent pairs without a valid offset, joined with an assumed zero offset.
    pub gap_pixels: Vec<(u16, u16)>,
}

impl DelayVector {
    pub fn zeros(num_pixels: u16) -> Self {
        DelayVector { delays_ps: vec![0.0; num_pixels as usize], provenance: Vec::new(), gap_pixels: Vec::new() }
    }

    pub fn has_gaps(&self) -> bool {
        !self.gap_pixels.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let delays: serde_json::Map<String, serde_json::Value> =
            self.delays_ps.iter().enumerate().map(|(p, d)| (p.to_string(), (*d).into())).collect();
        let provenance: Vec<_> = self
            .provenance
            .iter()
            .map(|m| {
                serde_json::json!({
                    "i": m.i,
                    "j": m.j,
                    "offset_ps": m.offset_ps,
                    "sigma_ps": if m.sigma_ps.is_finite() { Some(m.sigma_ps) } else { None },
                    "valid": m.valid,
                })
            })
            .collect();
        serde_json::json!({
            "schema_version": DELAYS_SCHEMA_VERSION,
            "delays_ps": delays,
            "provenance": provenance,
            "gap_pixels": self.gap_pixels,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, OffsetError> {
        let bad = |m: &str| OffsetError::Json(m.to_string());
        let version = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing schema_version"))?;
        if version != DELAYS_SCHEMA_VERSION as u64 {
            return Err(OffsetError::Json(format!("unsupported schema_version {version}")));
        }
        let map = value.get("delays_ps").and_then(|v| v.as_object()).ok_or_else(|| bad("missing delays_ps map"))?;
        let mut delays = vec![f64::NAN; map.len()];
        for (k, v) in map {
            let p: usize = k.parse().map_err(|_| OffsetError::Json(format!("pixel key {k:?} is not an integer")))?;
            let d = v.as_f64().ok_or_else(|| OffsetError::Json(format!("delay of pixel {p} is not a number")))?;
            *delays.get_mut(p).ok_or_else(|| OffsetError::Json(format!("pixel keys must be 0..{}", map.len())))? = d;
        }
        let mut provenance = Vec::new();
        if let Some(list) = value.get("provenance").and_then(|v| v.as_array()) {
            for m in list {
                let num = |k: &str| m.get(k).and_then(|v| v.as_f64());
                provenance.push(OffsetMeasurement {
                    i: num("i").ok_or_else(|| bad("provenance entry without i"))? as u16,
                    j: num("j").ok_or_else(|| bad("provenance entry without j"))? as u16,
                    offset_ps: num("offset_ps").unwrap_or(0.0),
                    sigma_ps: num("sigma_ps").unwrap_or(f64::INFINITY),
                    valid: m.get("valid").and_then(|v| v.as_bool()).unwrap_or(false),
                });
            }
        }
        let gap_pixels = match value.get("gap_pixels") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| OffsetError::Json(e.to_string()))?,
            None => Vec::new(),
        };
        Ok(DelayVector { delays_ps: delays, provenance, gap_pixels })
    }
}

/// Solves the adjacent-offset chain by forward substitution and shifts the
/// result to zero mean. Missing or invalid pairs are bridged with a zero offset
/// and listed in `gap_pixels`.
pub fn solve_delays(measurements: &[OffsetMeasurement], num_pixels: u16) -> Result<DelayVector, OffsetError> {
    let n = num_pixels as usize;
    let mut offsets: Vec<Option<f64>> = vec![None; n.saturating_sub(1)];
    for m in measurements {
        if m.j != m.i.wrapping_add(1) || m.j >= num_pixels {
            return Err(OffsetError::NotAdjacent { i: m.i, j: m.j, num_pixels });
        }
        if m.valid {
            offsets[m.i as usize] = Some(m.offset_ps);
        }
    }
    if offsets.iter().all(Option::is_none) {
        return Err(OffsetError::NoValidMeasurements);
    }
    let mut d = vec![0.0; n];
    let mut gap_pixels = Vec::new();
    for (i, off) in offsets.iter().enumerate() {
        d[i + 1] = match off {
            Some(o) => d[i] - o,
            None => {
                log::debug!("no offset for pixels {i}/{}, joining with zero", i + 1);
                gap_pixels.push((i as u16, i as u16 + 1));
                d[i]
            }
        };
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    for v in &mut d {
        *v -= mean;
    }
    Ok(DelayVector { delays_ps: d, provenance: measurements.to_vec(), gap_pixels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedRecord {
    pub pixel: u16,
    pub time_ps: f64,
    /// False when the corrected time left `[0, cycle_period)`.
    pub in_window: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedCycle {
    pub cycle_index: u64,
    pub records: Vec<CorrectedRecord>,
}

fn check_coverage(sensor: &SensorConfig, delays: &DelayVector) -> Result<(), OffsetError> {
    if delays.delays_ps.len() < sensor.num_pixels as usize || delays.delays_ps.iter().any(|d| !d.is_finite()) {
        return Err(OffsetError::Coverage { got: delays.delays_ps.len(), need: sensor.num_pixels as usize });
    }
    Ok(())
}

/// Subtracts each pixel's delay. Records are kept in their original order and
/// never wrapped or clamped into the cycle.
pub fn apply_delays(stream: &Stream, delays: &DelayVector) -> Result<Vec<CorrectedCycle>, OffsetError> {
    let sensor = stream.sensor();
    check_coverage(sensor, delays)?;
    let period = sensor.cycle_period_ps as f64;
    Ok(stream
        .cycles
        .iter()
        .map(|c| CorrectedCycle {
            cycle_index: c.cycle_index,
            records: c
                .records
                .iter()
                .map(|r| {
                    let t = r.time_ps as f64 - delays.delays_ps[r.pixel as usize];
                    CorrectedRecord { pixel: r.pixel, time_ps: t, in_window: (0.0..period).contains(&t) }
                })
                .collect(),
        })
        .collect())
}

/// Pair histogram over delay-corrected cycles.
pub fn histogram_corrected(
    cycles: &[CorrectedCycle],
    pair: (u16, u16),
    binning: Binning,
) -> Result<DeltaHistogram, OffsetError> {
    let (a, b) = pair;
    if a == b {
        return Err(CoincidenceError::SamePixel(a).into());
    }
    binning.validate()?;
    let mut h = DeltaHistogram::empty(a, b, binning);
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for c in cycles {
        ta.clear();
        tb.clear();
        for r in &c.records {
            if r.pixel == a {
                ta.push(r.time_ps);
            } else if r.pixel == b {
                tb.push(r.time_ps);
            }
        }
        h.accumulate(&ta, &tb);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(offsets: &[f64]) -> Vec<OffsetMeasurement> {
        offsets
            .iter()
            .enumerate()
            .map(|(i, &o)| OffsetMeasurement { i: i as u16, j: i as u16 + 1, offset_ps: o, sigma_ps: 1.0, valid: true })
            .collect()
    }

    #[test]
    fn zero_offsets_zero_delays() {
        let d = solve_delays(&chain(&[0.0; 255]), 256).unwrap();
        assert!(d.delays_ps.iter().all(|&v| v == 0.0));
        assert!(!d.has_gaps());
    }

    #[test]
    fn four_pixel_residuals() {
        let offs = [100.0, -50.0, 20.0];
        let d = solve_delays(&chain(&offs), 4).unwrap();
        let x = &d.delays_ps;
        for (i, o) in offs.iter().enumerate() {
            assert!((x[i] - x[i + 1] - o).abs() < 1e-9);
        }
        assert!(x.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn gaps_are_flagged_and_bridged() {
        let mut m = chain(&[10.0, 20.0, 30.0]);
        m[1].valid = false;
        let d = solve_delays(&m, 4).unwrap();
        assert_eq!(d.gap_pixels, vec![(1, 2)]);
        assert!((d.delays_ps[1] - d.delays_ps[2]).abs() < 1e-12);
        assert!((d.delays_ps[0] - d.delays_ps[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn nothing_valid_is_an_error() {
        let mut m = chain(&[1.0, 2.0]);
        m.iter_mut().for_each(|m| m.valid = false);
        assert!(matches!(solve_delays(&m, 3), Err(OffsetError::NoValidMeasurements)));
        assert!(matches!(solve_delays(&[], 3), Err(OffsetError::NoValidMeasurements)));
    }

    #[test]
    fn non_adjacent_rejected() {
        let m = OffsetMeasurement { i: 0, j: 2, offset_ps: 0.0, sigma_ps: 1.0, valid: true };
        assert!(matches!(solve_delays(&[m], 4), Err(OffsetError::NotAdjacent { .. })));
    }

    #[test]
    fn json_round_trip() {
        let d = solve_delays(&chain(&[5.0, -3.0]), 3).unwrap();
        let back = DelayVector::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn degraded_threshold() {
        let mut m = chain(&[0.0; 10]);
        m[0].valid = false;
        m[1].valid = false;
        assert!(!summarize(m.clone()).degraded);
        m[2].valid = false;
        assert!(summarize(m).degraded);
    }
}
