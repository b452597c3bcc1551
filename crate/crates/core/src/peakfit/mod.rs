//! Gaussian-on-constant-background fits to coincidence histograms.
//!
//! The model is `f(x) = bg + Σ A·exp(−(x−μ)²/(2σ²))` with one or two peaks
//! sharing the background. Residuals are weighted by the inverse Poisson
//! variance of each bin and parameter uncertainties come from the inverse of
//! `JᵀWJ` at the optimum.

mod lm;

use serde::{Deserialize, Serialize};

use self::lm::{Model, Problem};
use crate::coincidence::DeltaHistogram;
use crate::rates::median;

pub use self::lm::{COST_TOLERANCE, MAX_ITERATIONS, STEP_TOLERANCE};

pub const MIN_BINS: usize = 10;
pub const FIT_SCHEMA_VERSION: u32 = 1;
/// Required significance, in standard deviations, for a peak to count.
pub const SIGNIFICANCE: f64 = 3.0;
const FWHM_PER_SIGMA: f64 = 2.354_820_045;
const MIN_SIGMA_BINS: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("need at least {MIN_BINS} bins, got {0}")]
    TooFewBins(usize),
    #[error("invalid fit input: {0}")]
    BadData(String),
    #[error("fit did not converge after {iterations} iterations (last parameters {last:?})")]
    NotConverged { last: Vec<f64>, iterations: usize },
    #[error("peaks at separation {separation:.1} ps are not resolvable (need more than {limit:.1} ps)")]
    MergedPeaks { separation: f64, limit: f64 },
}

/// `bg + amp·exp(−(x−mu)²/(2·sigma²))`.
pub fn gaussian(x: f64, bg: f64, amp: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    bg + amp * (-0.5 * z * z).exp()
}

/// Partial derivatives of [`gaussian`] with respect to `[bg, amp, mu, sigma]`.
pub fn gaussian_jacobian(x: f64, p: &[f64; 4]) -> [f64; 4] {
    let mut g = [0.0; 4];
    Gaussians { peaks: 1, yscale: 1.0 }.gradient(x, p, &mut g);
    g
}

struct Gaussians {
    peaks: usize,
    yscale: f64,
}

impl Model for Gaussians {
    fn n_params(&self) -> usize {
        1 + 3 * self.peaks
    }

    fn value(&self, x: f64, p: &[f64]) -> f64 {
        let mut v = p[0];
        for k in 0..self.peaks {
            let (a, mu, s) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
            let z = (x - mu) / s;
            v += a * (-0.5 * z * z).exp();
        }
        v
    }

    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for k in 0..self.peaks {
            let (a, mu, s) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k]);
            let z = (x - mu) / s;
            let e = (-0.5 * z * z).exp();
            out[1 + 3 * k] = e;
            out[2 + 3 * k] = a * e * z / s;
            out[3 + 3 * k] = a * e * z * z / s;
        }
    }

    fn step_scale(&self, p: &[f64], out: &mut [f64]) {
        let level = (0..self.peaks).map(|k| p[1 + 3 * k].abs()).sum::<f64>() + p[0].abs();
        let level = level.max(1e-3 * self.yscale);
        out[0] = level;
        for k in 0..self.peaks {
            out[1 + 3 * k] = level;
            out[2 + 3 * k] = p[3 + 3 * k];
            out[3 + 3 * k] = p[3 + 3 * k];
        }
    }
}

/// Bin centers, values and per-bin variances.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FitData {
    pub fn new(x: Vec<f64>, y: Vec<f64>, variance: Vec<f64>) -> Result<Self, FitError> {
        if x.len() != y.len() || x.len() != variance.len() {
            return Err(FitError::BadData("x, y and variance lengths differ".into()));
        }
        if x.len() < MIN_BINS {
            return Err(FitError::TooFewBins(x.len()));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(FitError::BadData("non-finite value".into()));
        }
        if y.iter().all(|&v| v == 0.0) {
            return Err(FitError::BadData("no counts".into()));
        }
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(FitError::BadData("variances must be positive and finite".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FitError::BadData("bin centers must increase".into()));
        }
        Ok(FitData { x, y, variance })
    }

    /// Uses normalized values when present, raw counts otherwise.
    pub fn from_histogram(h: &DeltaHistogram) -> Result<Self, FitError> {
        FitData::new(h.centers(), h.values(), h.variances())
    }

    fn bin_width(&self) -> f64 {
        self.x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    fn yscale(&self) -> f64 {
        let m = self.y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 { m } else { 1.0 }
    }

    fn range(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub bg: f64,
    pub amp: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    pub init: Option<Seeds>,
    pub mu_bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakStatus {
    Significant,
    NoSignificantPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub amp: f64,
    pub amp_err: f64,
    pub mu: f64,
    pub mu_err: f64,
    pub sigma: f64,
    pub sigma_err: f64,
    pub contrast: f64,
    pub contrast_err: f64,
    pub status: PeakStatus,
}

impl Peak {
    pub fn is_significant(&self) -> bool {
        self.status == PeakStatus::Significant
    }

    /// `amp_idx` is the position of this peak's amplitude in `params`;
    /// `mu` and `sigma` follow it.
    fn from_solution(params: &[f64], cov: &nalgebra::DMatrix<f64>, amp_idx: usize) -> Peak {
        let err = |i: usize| cov[(i, i)].max(0.0).sqrt();
        let (bg, amp) = (params[0], params[amp_idx]);
        let contrast = amp / bg;
        let var_c = cov[(amp_idx, amp_idx)] / (bg * bg) + amp * amp * cov[(0, 0)] / bg.powi(4)
            - 2.0 * amp * cov[(0, amp_idx)] / bg.powi(3);
        let contrast_err = var_c.max(0.0).sqrt();
        let amp_err = err(amp_idx);
        // With almost no background the contrast is ill-conditioned, so the
        // amplitude alone may also establish the peak.
        let significant = amp > 0.0
            && (contrast >= SIGNIFICANCE * contrast_err || amp >= SIGNIFICANCE * amp_err);
        Peak {
            amp,
            amp_err,
            mu: params[amp_idx + 1],
            mu_err: err(amp_idx + 1),
            sigma: params[amp_idx + 2],
            sigma_err: err(amp_idx + 2),
            contrast,
            contrast_err,
            status: if significant { PeakStatus::Significant } else { PeakStatus::NoSignificantPeak },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub bg: f64,
    pub bg_err: f64,
    #[serde(flatten)]
    pub peak: Peak,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    /// Row-major, parameter order `[bg, amp, mu, sigma]`.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianFit {
    pub fn is_significant(&self) -> bool {
        self.peak.is_significant()
    }

    pub fn params(&self) -> [f64; 4] {
        [self.bg, self.peak.amp, self.peak.mu, self.peak.sigma]
    }

    pub fn errors(&self) -> [f64; 4] {
        [self.bg_err, self.peak.amp_err, self.peak.mu_err, self.peak.sigma_err]
    }

    pub fn model(&self, x: f64) -> f64 {
        gaussian(x, self.bg, self.peak.amp, self.peak.mu, self.peak.sigma)
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeakFit {
    pub bg: f64,
    pub bg_err: f64,
    /// The peak nearer `Δt = 0`.
    pub ct: Peak,
    pub hbt: Peak,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    /// Row-major, order `[bg, ct amp, ct mu, ct sigma, hbt amp, hbt mu, hbt sigma]`.
    pub covariance: Vec<Vec<f64>>,
}

impl TwoPeakFit {
    pub fn model(&self, x: f64) -> f64 {
        gaussian(x, self.bg, self.ct.amp, self.ct.mu, self.ct.sigma) + gaussian(x, 0.0, self.hbt.amp, self.hbt.mu, self.hbt.sigma)
    }

    pub fn separation(&self) -> f64 {
        self.hbt.mu - self.ct.mu
    }

    /// Standard error of [`separation`](Self::separation) including the
    /// correlation between the two centers.
    pub fn separation_err(&self) -> f64 {
        let c = &self.covariance;
        (c[2][2] + c[5][5] - 2.0 * c[2][5]).max(0.0).sqrt()
    }
}

fn seeds(data: &FitData) -> Seeds {
    let bg = median(&data.y);
    let (imax, &ymax) = data
        .y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("data has bins");
    let amp = ymax - bg;
    let bw = data.bin_width();
    let sigma = if amp > 0.0 {
        let half = bg + amp / 2.0;
        let mut lo = imax;
        while lo > 0 && data.y[lo - 1] > half {
            lo -= 1;
        }
        let mut hi = imax;
        while hi + 1 < data.y.len() && data.y[hi + 1] > half {
            hi += 1;
        }
        (data.x[hi] - data.x[lo] + bw) / FWHM_PER_SIGMA
    } else {
        2.0 * bw
    };
    Seeds { bg, amp, mu: data.x[imax], sigma }
}

fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

struct Limits {
    bg_min: f64,
    sigma: (f64, f64),
    mu: (f64, f64),
}

fn limits(data: &FitData, mu_bounds: Option<(f64, f64)>) -> Result<Limits, FitError> {
    let (x0, x1) = data.range();
    let bw = data.bin_width();
    let mu = match mu_bounds {
        Some((lo, hi)) => (lo.max(x0), hi.min(x1)),
        None => (x0, x1),
    };
    if mu.0.is_nan() || mu.1.is_nan() || mu.0 > mu.1 {
        return Err(FitError::BadData(format!("mu bounds {mu_bounds:?} do not overlap the data range")));
    }
    Ok(Limits { bg_min: 1e-9 * data.yscale(), sigma: (MIN_SIGMA_BINS * bw, x1 - x0), mu })
}

/// Single-peak fit.
pub fn fit_gaussian(data: &FitData, options: &FitOptions) -> Result<GaussianFit, FitError> {
    let lim = limits(data, options.mu_bounds)?;
    let s = options.init.unwrap_or_else(|| seeds(data));
    let weight: Vec<f64> = data.variance.iter().map(|v| 1.0 / v).collect();
    let problem = Problem {
        x: &data.x,
        y: &data.y,
        weight: &weight,
        lower: vec![lim.bg_min, f64::NEG_INFINITY, lim.mu.0, lim.sigma.0],
        upper: vec![f64::INFINITY, f64::INFINITY, lim.mu.1, lim.sigma.1],
    };
    let model = Gaussians { peaks: 1, yscale: data.yscale() };
    let sol = lm::solve(&model, &problem, &[s.bg, s.amp, s.mu, s.sigma])
        .map_err(|st| FitError::NotConverged { last: st.params, iterations: st.iterations })?;
    let cov = lm::covariance(&sol.information);
    Ok(GaussianFit {
        bg: sol.params[0],
        bg_err: cov[(0, 0)].max(0.0).sqrt(),
        peak: Peak::from_solution(&sol.params, &cov, 1),
        chi2: sol.chi2,
        dof: data.x.len().saturating_sub(4),
        iterations: sol.iterations,
        covariance: to_rows(&cov),
    })
}

/// Fits two peaks with a shared background. `separation_hint` is the expected
/// distance between them; the second peak is searched on whichever side of the
/// tallest peak holds more excess counts.
pub fn fit_two_peaks(data: &FitData, separation_hint: f64) -> Result<TwoPeakFit, FitError> {
    if !(separation_hint.is_finite() && separation_hint > 0.0) {
        return Err(FitError::BadData(format!("separation hint must be positive, got {separation_hint}")));
    }
    let lim = limits(data, None)?;
    let (x0, x1) = data.range();
    let s1 = seeds(data);
    let reach = (3.0 * s1.sigma).max(2.0 * data.bin_width());
    let excess = |c: f64| -> f64 {
        data.x.iter().zip(&data.y).filter(|(x, _)| (*x - c).abs() <= reach).map(|(_, y)| y - s1.bg).sum()
    };
    let candidates: Vec<f64> =
        [s1.mu + separation_hint, s1.mu - separation_hint].into_iter().filter(|c| (x0..=x1).contains(c)).collect();
    let centre = candidates
        .iter()
        .copied()
        .max_by(|a, b| excess(*a).total_cmp(&excess(*b)))
        .ok_or_else(|| FitError::BadData("separation hint places the second peak outside the histogram".into()))?;
    let half = separation_hint / 2.0;
    let mu2_range = ((centre - half).max(x0), (centre + half).min(x1));
    let near = |x: &f64| (x - centre).abs() <= separation_hint / 4.0;
    let (mu2, y2) = data
        .x
        .iter()
        .zip(&data.y)
        .filter(|(x, _)| near(x))
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(x, y)| (*x, *y))
        .unwrap_or((centre, s1.bg));
    let mu1_range = ((s1.mu - half).max(x0), (s1.mu + half).min(x1));

    let weight: Vec<f64> = data.variance.iter().map(|v| 1.0 / v).collect();
    let problem = Problem {
        x: &data.x,
        y: &data.y,
        weight: &weight,
        lower: vec![lim.bg_min, f64::NEG_INFINITY, mu1_range.0, lim.sigma.0, f64::NEG_INFINITY, mu2_range.0, lim.sigma.0],
        upper: vec![f64::INFINITY, f64::INFINITY, mu1_range.1, lim.sigma.1, f64::INFINITY, mu2_range.1, lim.sigma.1],
    };
    let model = Gaussians { peaks: 2, yscale: data.yscale() };
    let start = [s1.bg, s1.amp, s1.mu, s1.sigma, y2 - s1.bg, mu2, s1.sigma];
    let sol = lm::solve(&model, &problem, &start)
        .map_err(|st| FitError::NotConverged { last: st.params, iterations: st.iterations })?;
    let mut p = sol.params.clone();
    let mut cov = lm::covariance(&sol.information);
    if p[5].abs() < p[2].abs() {
        let order = [0usize, 4, 5, 6, 1, 2, 3];
        p = order.iter().map(|&i| sol.params[i]).collect();
        cov = nalgebra::DMatrix::from_fn(7, 7, |i, j| cov[(order[i], order[j])]);
    }
    let ct = Peak::from_solution(&p, &cov, 1);
    let hbt = Peak::from_solution(&p, &cov, 4);
    let separation = (ct.mu - hbt.mu).abs();
    let limit = 2.0 * (ct.sigma + hbt.sigma);
    if ct.is_significant() && hbt.is_significant() && separation <= limit {
        return Err(FitError::MergedPeaks { separation, limit });
    }
    Ok(TwoPeakFit {
        bg: p[0],
        bg_err: cov[(0, 0)].max(0.0).sqrt(),
        ct,
        hbt,
        chi2: sol.chi2,
        dof: data.x.len().saturating_sub(7),
        iterations: sol.iterations,
        covariance: to_rows(&cov),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(params: [f64; 4], n: usize, x0: f64, bw: f64) -> FitData {
        let x: Vec<f64> = (0..n).map(|i| x0 + (i as f64 + 0.5) * bw).collect();
        let y: Vec<f64> = x.iter().map(|&x| gaussian(x, params[0], params[1], params[2], params[3])).collect();
        let var = y.iter().map(|v| v.max(1.0)).collect();
        FitData::new(x, y, var).unwrap()
    }

    #[test]
    fn noiseless_identity() {
        let truth = [1.0, 0.5, 5000.0, 200.0];
        let d = synth(truth, 200, 3000.0, 20.0);
        let f = fit_gaussian(&d, &FitOptions::default()).unwrap();
        for (got, want) in f.params().iter().zip(truth) {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(f.chi2 < 1e-12);
        assert_eq!(f.peak.contrast, f.peak.amp / f.bg);
    }

    #[test]
    fn flat_histogram_has_no_peak() {
        let d = synth([40.0, 0.0, 0.0, 1.0], 100, -5000.0, 100.0);
        let f = fit_gaussian(&d, &FitOptions::default()).unwrap();
        assert_eq!(f.peak.status, PeakStatus::NoSignificantPeak);
        assert!((f.bg - 40.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_bins() {
        assert!(matches!(
            FitData::new(vec![0.0; 5], vec![0.0; 5], vec![1.0; 5]),
            Err(FitError::TooFewBins(5))
        ));
    }

    #[test]
    fn mu_bounds_respected() {
        let d = synth([1.0, 3.0, 0.0, 100.0], 200, -5000.0, 50.0);
        let f = fit_gaussian(&d, &FitOptions { mu_bounds: Some((1000.0, 3000.0)), ..Default::default() }).unwrap();
        assert!((1000.0..=3000.0).contains(&f.peak.mu));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = [2.0, 1.5, 30.0, 12.0];
        for x in [-10.0, 25.0, 30.0, 44.0, 70.0] {
            let g = gaussian_jacobian(x, &p);
            for i in 0..4 {
                let h = 1e-5 * p[i].abs().max(1.0);
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                let fd = (gaussian(x, a[0], a[1], a[2], a[3]) - gaussian(x, b[0], b[1], b[2], b[3])) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "x {x} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn two_peaks_recovered_and_labelled() {
        let x: Vec<f64> = (0..400).map(|i| -10_000.0 + (i as f64 + 0.5) * 50.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&x| gaussian(x, 10.0, 30.0, 40.0, 60.0) + gaussian(x, 0.0, 5.0, 5267.0, 150.0))
            .collect();
        let d = FitData::new(x, y.clone(), y.iter().map(|v| v.max(1.0)).collect()).unwrap();
        let f = fit_two_peaks(&d, 5000.0).unwrap();
        assert!((f.ct.mu - 40.0).abs() < 1e-4);
        assert!((f.hbt.mu - 5267.0).abs() < 1e-4);
        assert!((f.separation() - 5227.0).abs() < 1e-4);
        assert!(f.ct.contrast > f.hbt.contrast);
    }

    #[test]
    fn single_peak_with_hint_flags_second() {
        let d = synth([10.0, 30.0, 0.0, 60.0], 400, -10_000.0, 50.0);
        let f = fit_two_peaks(&d, 5000.0).unwrap();
        assert!(f.ct.is_significant());
        assert!(!f.hbt.is_significant());
        assert!(f.hbt.amp.abs() < 1e-6);
    }

    #[test]
    fn merged_peaks_rejected() {
        let x: Vec<f64> = (0..200).map(|i| -5_000.0 + (i as f64 + 0.5) * 50.0).collect();
        let y: Vec<f64> =
            x.iter().map(|&x| gaussian(x, 10.0, 30.0, 0.0, 200.0) + gaussian(x, 0.0, 20.0, 500.0, 200.0)).collect();
        let d = FitData::new(x, y.clone(), y.iter().map(|v| v.max(1.0)).collect()).unwrap();
        assert!(matches!(fit_two_peaks(&d, 500.0), Err(FitError::MergedPeaks { .. })));
    }
}
