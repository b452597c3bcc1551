//! Monte Carlo generator of timestamp streams with known ground truth.
//!
//! Every acquisition cycle receives dark and ambient counts, beam photons,
//! time-correlated photon pairs between the first two beams, cross-talk
//! spawns, per-pixel delays and timing jitter. Cycles are produced in blocks
//! of [`BLOCK_CYCLES`], each from its own ChaCha8 stream selected by block
//! index, so output bytes depend only on the configuration and seed and not on
//! the number of worker threads.

mod engine;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::timestream::{AcquisitionCycle, SensorConfig, Stream, StreamHeader, ACQUIRED_CYCLES_KEY, FIRST_CYCLE_KEY};

pub use self::engine::{Counters, LineageTag, RecordKind, SimCycles};

pub const BLOCK_CYCLES: u64 = 1024;
pub const MAX_RECORDS_PER_CYCLE: f64 = 1e4;
/// Lineage is refused above this many expected records.
pub const MAX_LINEAGE_RECORDS: f64 = 2e6;
pub const TRUTH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Invalid(String),
    #[error("mean of {0:.1} records per cycle exceeds the model limit of {MAX_RECORDS_PER_CYCLE}")]
    TooDense(f64),
    #[error("lineage requested for about {0:.0} records, limit is {MAX_LINEAGE_RECORDS}")]
    LineageTooLarge(f64),
}

fn default_jitter() -> f64 {
    40.0
}

fn default_ct_sigma() -> f64 {
    30.0
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcrProfile {
    /// Rate of every pixel not otherwise listed.
    #[serde(default)]
    pub median_cps: f64,
    /// Pixel → rate overrides.
    #[serde(default)]
    pub hot_pixels: BTreeMap<u16, f64>,
    /// Full per-pixel rate list; replaces `median_cps` and `hot_pixels`.
    #[serde(default)]
    pub per_pixel_cps: Option<Vec<f64>>,
    /// Dark rate multiplier reached at the end of the run, rising linearly
    /// from 1 at the start.
    #[serde(default = "default_one")]
    pub drift_end_factor: f64,
}

impl DcrProfile {
    pub fn rates(&self, num_pixels: u16) -> Vec<f64> {
        if let Some(v) = &self.per_pixel_cps {
            return v.clone();
        }
        let mut r = vec![self.median_cps; num_pixels as usize];
        for (&p, &v) in &self.hot_pixels {
            if let Some(slot) = r.get_mut(p as usize) {
                *slot = v;
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beam {
    pub pixel: u16,
    pub rate_cps: f64,
}

/// A distinguishability class, such as one wavelength and polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotonClass {
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bunching {
    /// Fraction of arm-a photons emitted together with an arm-b partner,
    /// before the same-class requirement.
    pub pair_fraction: f64,
    /// Gaussian spread of the partner's arrival time.
    pub correlation_sigma_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub dcr: DcrProfile,
    /// Uniform illumination rate added to every pixel.
    #[serde(default)]
    pub ambient_cps: f64,
    /// The first two beams form arms a and b of the correlated pairs.
    #[serde(default)]
    pub beams: Vec<Beam>,
    /// Defaults to a single class.
    #[serde(default)]
    pub class_mix: Vec<PhotonClass>,
    #[serde(default)]
    pub bunching: Bunching,
    /// Extra delay of the arm-b partner of each pair.
    #[serde(default)]
    pub fiber_delay_ps: f64,
    /// Pixel distance → probability that a detection triggers that neighbor.
    #[serde(default)]
    pub ct_profile: BTreeMap<usize, f64>,
    #[serde(default = "default_ct_sigma")]
    pub ct_time_sigma_ps: f64,
    /// True per-pixel delays; empty means all zero.
    #[serde(default)]
    pub delays_ps: Vec<f64>,
    #[serde(default = "default_jitter")]
    pub jitter_sigma_ps: f64,
    /// When set, records carry raw TDC codes digitized with these bin widths.
    #[serde(default)]
    pub tdc_widths_ps: Option<Vec<f64>>,
    #[serde(default)]
    pub record_lineage: bool,
}

impl SimConfig {
    pub fn new(duration_s: f64) -> Self {
        SimConfig {
            sensor: SensorConfig::default(),
            seed: 0,
            duration_s,
            dcr: DcrProfile { drift_end_factor: 1.0, ..Default::default() },
            ambient_cps: 0.0,
            beams: Vec::new(),
            class_mix: Vec::new(),
            bunching: Bunching::default(),
            fiber_delay_ps: 0.0,
            ct_profile: BTreeMap::new(),
            ct_time_sigma_ps: default_ct_sigma(),
            delays_ps: Vec::new(),
            jitter_sigma_ps: default_jitter(),
            tdc_widths_ps: None,
            record_lineage: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Invalid(e.to_string()))
    }

    pub fn total_cycles(&self) -> u64 {
        (self.duration_s * 1e12 / self.sensor.cycle_period_ps as f64).round() as u64
    }

    pub fn classes(&self) -> Vec<PhotonClass> {
        if self.class_mix.is_empty() {
            vec![PhotonClass { label: "default".into(), weight: 1.0 }]
        } else {
            self.class_mix.clone()
        }
    }

    pub fn delays(&self) -> Vec<f64> {
        if self.delays_ps.is_empty() {
            vec![0.0; self.sensor.num_pixels as usize]
        } else {
            self.delays_ps.clone()
        }
    }

    /// Rate of correlated pairs in each class.
    pub fn pair_rates(&self) -> Vec<f64> {
        let ra = self.beams.first().map_or(0.0, |b| b.rate_cps);
        self.classes().iter().map(|c| self.bunching.pair_fraction * ra * c.weight * c.weight).collect()
    }

    /// Mean records per cycle before cross-talk and drops.
    pub fn mean_primary_per_cycle(&self) -> f64 {
        let dark: f64 = self.dcr.rates(self.sensor.num_pixels).iter().sum::<f64>() * self.dcr.drift_end_factor.max(1.0);
        let ambient = self.ambient_cps * self.sensor.num_pixels as f64;
        let beams: f64 = self.beams.iter().map(|b| b.rate_cps).sum();
        (dark + ambient + beams) * self.sensor.cycle_period_s()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        let rate_ok = |v: f64| v.is_finite() && v >= 0.0;
        self.sensor.validate().map_err(SimError::Invalid)?;
        let n = self.sensor.num_pixels as usize;
        if !rate_ok(self.duration_s) {
            return bad(format!("duration_s must be non-negative, got {}", self.duration_s));
        }
        let dark = self.dcr.rates(self.sensor.num_pixels);
        if dark.len() != n {
            return bad(format!("per_pixel_cps has {} entries for {n} pixels", dark.len()));
        }
        if let Some((p, _)) = self.dcr.hot_pixels.iter().find(|(p, _)| **p as usize >= n) {
            return bad(format!("hot pixel {p} out of range"));
        }
        if !dark.iter().all(|&r| rate_ok(r)) || !rate_ok(self.dcr.median_cps) {
            return bad("dark rates must be non-negative".into());
        }
        if !rate_ok(self.dcr.drift_end_factor) {
            return bad("drift_end_factor must be non-negative".into());
        }
        if !rate_ok(self.ambient_cps) {
            return bad("ambient_cps must be non-negative".into());
        }
        for b in &self.beams {
            if b.pixel as usize >= n {
                return bad(format!("beam pixel {} out of range", b.pixel));
            }
            if !rate_ok(b.rate_cps) {
                return bad(format!("beam rate {} must be non-negative", b.rate_cps));
            }
        }
        theoretical_contrast(&self.classes())?;
        let bf = self.bunching.pair_fraction;
        if !(0.0..=1.0).contains(&bf) {
            return bad(format!("pair_fraction {bf} outside [0, 1]"));
        }
        if bf > 0.0 {
            if self.beams.len() < 2 {
                return bad("correlated pairs need at least two beams".into());
            }
            if self.beams[0].pixel == self.beams[1].pixel {
                return bad("the two pair arms must use different pixels".into());
            }
            let rb = self.beams[1].rate_cps;
            for (c, r) in self.classes().iter().zip(self.pair_rates()) {
                if r > rb * c.weight * (1.0 + 1e-12) {
                    return bad(format!("pair rate of class {} exceeds the arm-b beam rate", c.label));
                }
            }
        }
        if !rate_ok(self.bunching.correlation_sigma_ps) || !self.fiber_delay_ps.is_finite() {
            return bad("correlation_sigma_ps must be non-negative and fiber_delay_ps finite".into());
        }
        for (&d, &p) in &self.ct_profile {
            if d == 0 {
                return bad("ct_profile distances start at 1".into());
            }
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("ct probability {p} at distance {d} outside [0, 1]"));
            }
        }
        if !rate_ok(self.ct_time_sigma_ps) || !rate_ok(self.jitter_sigma_ps) {
            return bad("timing spreads must be non-negative".into());
        }
        if !self.delays_ps.is_empty() && self.delays_ps.len() != n {
            return bad(format!("delays_ps has {} entries for {n} pixels", self.delays_ps.len()));
        }
        if self.delays_ps.iter().any(|d| !d.is_finite()) {
            return bad("delays must be finite".into());
        }
        if let Some(w) = &self.tdc_widths_ps {
            if w.len() != self.sensor.tdc_bins_per_clock as usize {
                return bad(format!("tdc_widths_ps needs {} entries, got {}", self.sensor.tdc_bins_per_clock, w.len()));
            }
            let sum: f64 = w.iter().sum();
            let clock = self.sensor.clock_period_ps as f64;
            if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) || ((sum - clock) / clock).abs() > 1e-6 {
                return bad("tdc widths must be positive and sum to the clock period".into());
            }
        }
        let density = self.mean_primary_per_cycle();
        if density > MAX_RECORDS_PER_CYCLE {
            return Err(SimError::TooDense(density));
        }
        if self.record_lineage {
            let expected = density * self.total_cycles() as f64;
            if expected > MAX_LINEAGE_RECORDS {
                return Err(SimError::LineageTooLarge(expected));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader::new(self.sensor)
            .with_metadata("source", "spadkit-simulator")
            .with_metadata("seed", self.seed.to_string())
            .with_metadata(FIRST_CYCLE_KEY, "0")
            .with_metadata(ACQUIRED_CYCLES_KEY, self.total_cycles().to_string())
    }
}

/// Probability that two photons drawn from `mix` share a class, `Σ w_k²`.
pub fn theoretical_contrast(mix: &[PhotonClass]) -> Result<f64, SimError> {
    if mix.is_empty() {
        return Err(SimError::Invalid("class mix is empty".into()));
    }
    if mix.iter().any(|c| !(c.weight.is_finite() && c.weight >= 0.0)) {
        return Err(SimError::Invalid("class weights must be non-negative".into()));
    }
    let total: f64 = mix.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SimError::Invalid(format!("class weights sum to {total}, not 1")));
    }
    Ok(mix.iter().map(|c| c.weight * c.weight).sum())
}

/// Ground truth written next to a simulated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub schema_version: u32,
    pub seed: u64,
    pub delays_ps: Vec<f64>,
    pub ct_profile: BTreeMap<usize, f64>,
    pub fiber_delay_ps: f64,
    pub theoretical_contrast: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tdc_widths_ps: Option<Vec<f64>>,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Vec<LineageTag>>,
}

/// Prepared simulation; hands out the cycle iterator.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Simulator { config })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn header(&self) -> StreamHeader {
        self.config.header()
    }

    /// Non-empty cycles in increasing index order.
    pub fn cycles(&self) -> SimCycles {
        SimCycles::new(&self.config)
    }
}

/// Generates the whole stream in memory.
pub fn simulate(config: &SimConfig) -> Result<(Stream, Truth), SimError> {
    let sim = Simulator::new(config.clone())?;
    let mut it = sim.cycles();
    let cycles: Vec<AcquisitionCycle> = it.by_ref().collect();
    Ok((Stream::new(sim.header(), cycles), it.truth()))
}
