//! Cross-talk probability versus pixel distance, using hot pixels as sources.
//!
//! For a (source, target) pair the CT peak in the `t_target − t_source`
//! histogram is fitted, and the counts inside `μ ± 3σ` above the fitted
//! background are divided by the number of source detections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::{Binning, CoincidenceError, DeltaHistogram, EventIndex};
use crate::peakfit::{fit_gaussian, FitData, FitError, FitOptions, GaussianFit};
use crate::rates::RateReport;
use crate::timestream::Stream;

pub const MIN_SOURCE_COUNTS: u64 = 10_000;
pub const DEFAULT_D_MAX: usize = 20;
pub const DEFAULT_N_HOT: usize = 8;
pub const CT_SCHEMA_VERSION: u32 = 1;
/// Peak width assumed when integrating a window without a significant peak.
pub const NOMINAL_PEAK_SIGMA_PS: f64 = 100.0;
const AREA_SIGMAS: f64 = 3.0;

#[derive(Debug, thiserror::Error)]
pub enum CrosstalkError {
    #[error("source pixel {pixel} has {counts} counts, at least {min} are needed")]
    InsufficientSource { pixel: u16, counts: u64, min: u64 },
    #[error("rate report lists no hot pixels")]
    NoHotPixels,
    #[error("d_max and n_hot must be positive")]
    BadScan,
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtOptions {
    pub binning: Binning,
    /// Expected peak position; zero once delays are corrected.
    pub center_hint_ps: f64,
    /// The fitted center is confined to `center_hint_ps ± search_ps`.
    pub search_ps: f64,
    pub min_source_counts: u64,
}

impl Default for CtOptions {
    fn default() -> Self {
        CtOptions {
            binning: Binning::default(),
            center_hint_ps: 0.0,
            search_ps: 1_000.0,
            min_source_counts: MIN_SOURCE_COUNTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtEstimate {
    pub source: u16,
    pub target: u16,
    /// Estimate clamped to `[0, 1]`.
    pub probability: f64,
    /// Unclamped estimate, which can be negative through background noise.
    pub signed_probability: f64,
    pub error: f64,
    /// Set when no significant peak was found.
    pub upper_limit: Option<f64>,
    pub source_counts: u64,
    pub window_counts: u64,
    pub fit: Option<GaussianFit>,
}

impl CtEstimate {
    pub fn is_upper_limit(&self) -> bool {
        self.upper_limit.is_some()
    }
}

/// Probability estimate from an existing `t_target − t_source` histogram.
pub fn estimate_from_histogram(
    h: &DeltaHistogram,
    source_counts: u64,
    opts: &CtOptions,
) -> Result<CtEstimate, CrosstalkError> {
    if source_counts < opts.min_source_counts {
        return Err(CrosstalkError::InsufficientSource {
            pixel: h.pixel_a,
            counts: source_counts,
            min: opts.min_source_counts,
        });
    }
    let n = source_counts as f64;
    if h.counts.iter().all(|&c| c == 0) {
        return Ok(CtEstimate {
            source: h.pixel_a,
            target: h.pixel_b,
            probability: 0.0,
            signed_probability: 0.0,
            error: 1.0 / n,
            upper_limit: Some(3.0 / n),
            source_counts,
            window_counts: 0,
            fit: None,
        });
    }
    let mut raw = h.clone();
    raw.median = None;
    raw.normalized = None;
    let data = FitData::from_histogram(&raw)?;
    let fit = fit_gaussian(
        &data,
        &FitOptions {
            mu_bounds: Some((opts.center_hint_ps - opts.search_ps, opts.center_hint_ps + opts.search_ps)),
            ..Default::default()
        },
    )?;
    let significant = fit.is_significant();
    let (center, half) = if significant {
        (fit.peak.mu, AREA_SIGMAS * fit.peak.sigma)
    } else {
        (opts.center_hint_ps, AREA_SIGMAS * NOMINAL_PEAK_SIGMA_PS)
    };
    let (mut window_counts, mut n_bins) = (0u64, 0usize);
    for (x, &c) in data.x.iter().zip(&h.counts) {
        if (x - center).abs() <= half {
            window_counts += c;
            n_bins += 1;
        }
    }
    let area = window_counts as f64 - fit.bg * n_bins as f64;
    let signed_probability = area / n;
    let upper_limit = (!significant).then(|| (area.max(0.0) + 3.0 * (window_counts.max(1) as f64).sqrt()) / n);
    let expected = fit.bg * n_bins as f64 + area.max(0.0);
    let bg_term = if fit.bg_err.is_finite() { (fit.bg_err * n_bins as f64).powi(2) } else { 0.0 };
    let error = ((window_counts as f64).max(expected) + bg_term).sqrt() / n;
    Ok(CtEstimate {
        source: h.pixel_a,
        target: h.pixel_b,
        probability: signed_probability.clamp(0.0, 1.0),
        signed_probability,
        error,
        upper_limit,
        source_counts,
        window_counts,
        fit: Some(fit),
    })
}

/// Probability that a detection in `source` triggers one in `target`.
pub fn ct_probability(
    stream: &Stream,
    source: u16,
    target: u16,
    delays: Option<&[f64]>,
    opts: &CtOptions,
) -> Result<CtEstimate, CrosstalkError> {
    let h = crate::coincidence::build_histogram(stream, (source, target), opts.binning, delays)?;
    let counts = stream.cycles.iter().flat_map(|c| &c.records).filter(|r| r.pixel == source).count() as u64;
    estimate_from_histogram(&h, counts, opts)
}

/// Same as [`ct_probability`] on an indexed stream.
pub fn ct_probability_indexed(
    index: &EventIndex,
    source: u16,
    target: u16,
    delays: Option<&[f64]>,
    opts: &CtOptions,
) -> Result<CtEstimate, CrosstalkError> {
    let h = index.histogram((source, target), opts.binning, delays)?;
    estimate_from_histogram(&h, index.count(source), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtPoint {
    pub distance: usize,
    /// Mean over pairs, clamped to `[0, 1]`.
    pub mean: f64,
    pub signed_mean: f64,
    pub stderr: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtCurve {
    pub points: Vec<CtPoint>,
    /// `(hot pixel, neighbor)` pairs in scan order.
    pub sources: Vec<(u16, u16)>,
    pub estimates: Vec<CtEstimate>,
}

impl CtCurve {
    pub fn to_json(&self) -> serde_json::Value {
        let points: serde_json::Map<String, serde_json::Value> = self
            .points
            .iter()
            .map(|p| {
                (
                    p.distance.to_string(),
                    serde_json::json!({"mean": p.mean, "signed_mean": p.signed_mean, "stderr": p.stderr, "n_pairs": p.n_pairs}),
                )
            })
            .collect();
        let estimates: Vec<_> = self
            .estimates
            .iter()
            .map(|e| {
                serde_json::json!({
                    "source": e.source,
                    "target": e.target,
                    "probability": e.probability,
                    "signed_probability": e.signed_probability,
                    "error": e.error,
                    "upper_limit": e.upper_limit,
                    "source_counts": e.source_counts,
                    "window_counts": e.window_counts,
                })
            })
            .collect();
        serde_json::json!({
            "schema_version": CT_SCHEMA_VERSION,
            "distances": points,
            "sources": self.sources,
            "pairs": estimates,
        })
    }
}

/// `(hot, neighbor)` pairs for distances `1..=d_max`, clipped to the array.
pub fn scan_pairs(hot: &[u16], num_pixels: u16, d_max: usize) -> Vec<(u16, u16, usize)> {
    let mut out = Vec::new();
    for &h in hot {
        for d in 1..=d_max {
            if let Some(left) = (h as usize).checked_sub(d) {
                out.push((h, left as u16, d));
            }
            if h as usize + d < num_pixels as usize {
                out.push((h, (h as usize + d) as u16, d));
            }
        }
    }
    out
}

/// Combines per-pair estimates into one point. The standard error is the
/// larger of the sample spread and the propagated per-pair errors.
pub fn aggregate(distance: usize, estimates: &[&CtEstimate]) -> CtPoint {
    let n = estimates.len();
    let nf = n as f64;
    let mean = estimates.iter().map(|e| e.signed_probability).sum::<f64>() / nf;
    let propagated = estimates.iter().map(|e| e.error * e.error).sum::<f64>().sqrt() / nf;
    let sample = if n > 1 {
        let var = estimates.iter().map(|e| (e.signed_probability - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    CtPoint { distance, mean: mean.clamp(0.0, 1.0), signed_mean: mean, stderr: sample.max(propagated), n_pairs: n }
}

/// CT curve from the `n_hot` brightest hot pixels and their neighbors on both
/// sides up to `d_max` pixels away.
pub fn ct_scan(
    index: &EventIndex,
    report: &RateReport,
    d_max: usize,
    n_hot: usize,
    delays: Option<&[f64]>,
    opts: &CtOptions,
) -> Result<CtCurve, CrosstalkError> {
    if d_max == 0 || n_hot == 0 {
        return Err(CrosstalkError::BadScan);
    }
    if report.hot_pixels.is_empty() {
        return Err(CrosstalkError::NoHotPixels);
    }
    let hot: Vec<u16> = report.hot_pixels.iter().take(n_hot).map(|h| h.pixel).collect();
    let pairs = scan_pairs(&hot, index.sensor().num_pixels, d_max);
    let estimates: Vec<CtEstimate> = pairs
        .par_iter()
        .map(|&(s, t, _)| ct_probability_indexed(index, s, t, delays, opts))
        .collect::<Result<_, _>>()?;
    let points = (1..=d_max)
        .filter_map(|d| {
            let group: Vec<&CtEstimate> =
                pairs.iter().zip(&estimates).filter(|((_, _, dd), _)| *dd == d).map(|(_, e)| e).collect();
            (!group.is_empty()).then(|| aggregate(d, &group))
        })
        .collect();
    Ok(CtCurve { points, sources: pairs.iter().map(|&(s, t, _)| (s, t)).collect(), estimates })
}
