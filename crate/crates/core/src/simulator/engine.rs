use std::collections::VecDeque;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{theoretical_contrast, SimConfig, Truth, BLOCK_CYCLES, TRUTH_SCHEMA_VERSION};
use crate::calib_tdc::PixelLut;
use crate::timestream::{AcquisitionCycle, TimestampRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub dark: u64,
    pub ambient: u64,
    pub singles: u64,
    /// Correlated pairs; each contributes two detections.
    pub pairs: u64,
    pub ct_spawns: u64,
    /// Detections whose final time fell outside the cycle.
    pub dropped: u64,
    pub records: u64,
}

impl Counters {
    fn add(&mut self, o: &Counters) {
        self.dark += o.dark;
        self.ambient += o.ambient;
        self.singles += o.singles;
        self.pairs += o.pairs;
        self.ct_spawns += o.ct_spawns;
        self.dropped += o.dropped;
        self.records += o.records;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Dark,
    Ambient,
    Single,
    PairA,
    PairB,
    Crosstalk,
}

/// Origin of one emitted record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageTag {
    pub cycle_index: u64,
    pub pixel: u16,
    pub time_ps: u64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_source: Option<u16>,
}

struct CtTargets {
    targets: Vec<u16>,
    /// `log_survival[j]` is `Σ_{k<j} ln(1 − p_k)`.
    log_survival: Vec<f64>,
}

struct Plan {
    seed: u64,
    total_cycles: u64,
    period: f64,
    period_s: f64,
    clock: f64,
    duration_ps: f64,
    num_pixels: u16,
    dark_total: f64,
    dark_index: Option<WeightedIndex<f64>>,
    drift: f64,
    ambient_total: f64,
    singles: Vec<(u16, u16, f64)>,
    pairs: Vec<(u16, f64)>,
    arms: (u16, u16),
    corr_sigma: f64,
    fiber: f64,
    ct: Vec<CtTargets>,
    ct_sigma: f64,
    delays: Vec<f64>,
    jitter: f64,
    tdc: Option<PixelLut>,
    lineage: bool,
}

impl Plan {
    fn new(c: &SimConfig) -> Plan {
        let n = c.sensor.num_pixels as usize;
        let dark = c.dcr.rates(c.sensor.num_pixels);
        let dark_total: f64 = dark.iter().sum();
        let classes = c.classes();
        let pair_rates = c.pair_rates();
        let mut singles = Vec::new();
        for (bi, b) in c.beams.iter().enumerate() {
            for (k, cl) in classes.iter().enumerate() {
                let paired = if bi < 2 { pair_rates[k] } else { 0.0 };
                let r = (b.rate_cps * cl.weight - paired).max(0.0);
                if r > 0.0 {
                    singles.push((b.pixel, k as u16, r));
                }
            }
        }
        let pairs = pair_rates.iter().enumerate().filter(|(_, &r)| r > 0.0).map(|(k, &r)| (k as u16, r)).collect();
        let arms = match c.beams.as_slice() {
            [a, b, ..] => (a.pixel, b.pixel),
            _ => (0, 0),
        };
        let ct = (0..n)
            .map(|s| {
                let mut targets = Vec::new();
                let mut log_survival = vec![0.0];
                for (&d, &p) in &c.ct_profile {
                    if p <= 0.0 {
                        continue;
                    }
                    for t in [s.checked_sub(d), Some(s + d).filter(|&t| t < n)].into_iter().flatten() {
                        targets.push(t as u16);
                        let last = *log_survival.last().unwrap();
                        log_survival.push(last + (1.0 - p).ln());
                    }
                }
                CtTargets { targets, log_survival }
            })
            .collect();
        Plan {
            seed: c.seed,
            total_cycles: c.total_cycles(),
            period: c.sensor.cycle_period_ps as f64,
            period_s: c.sensor.cycle_period_s(),
            clock: c.sensor.clock_period_ps as f64,
            duration_ps: c.total_cycles() as f64 * c.sensor.cycle_period_ps as f64,
            num_pixels: c.sensor.num_pixels,
            dark_total,
            dark_index: (dark_total > 0.0).then(|| WeightedIndex::new(&dark).expect("validated rates")),
            drift: c.dcr.drift_end_factor,
            ambient_total: c.ambient_cps * n as f64,
            singles,
            pairs,
            arms,
            corr_sigma: c.bunching.correlation_sigma_ps,
            fiber: c.fiber_delay_ps,
            ct,
            ct_sigma: c.ct_time_sigma_ps,
            delays: c.delays(),
            jitter: c.jitter_sigma_ps,
            tdc: c.tdc_widths_ps.clone().map(PixelLut::from_widths),
            lineage: c.record_lineage,
        }
    }

    fn n_blocks(&self) -> u64 {
        self.total_cycles.div_ceil(BLOCK_CYCLES)
    }
}

const NO_CLASS: u16 = u16::MAX;
const NO_PAIR: u64 = u64::MAX;

#[derive(Clone, Copy)]
struct Event {
    cycle: u32,
    t: f64,
    pixel: u16,
    kind: RecordKind,
    class: u16,
    pair: u64,
    source: u16,
}

struct Emitted {
    cycle: u32,
    time_ps: u64,
    raw_code: Option<u32>,
    event: Event,
}

struct BlockOutput {
    cycles: Vec<AcquisitionCycle>,
    counters: Counters,
    lineage: Vec<LineageTag>,
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
    } else {
        0
    }
}

fn normal<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * sigma
}

fn generate_block(plan: &Plan, block: u64) -> BlockOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(block);
    let first = block * BLOCK_CYCLES;
    let ncyc = BLOCK_CYCLES.min(plan.total_cycles - first) as u32;
    let span_s = ncyc as f64 * plan.period_s;
    let mut counters = Counters::default();
    let mut events: Vec<Event> = Vec::new();
    let base = Event { cycle: 0, t: 0.0, pixel: 0, kind: RecordKind::Dark, class: NO_CLASS, pair: NO_PAIR, source: 0 };

    let mid = (first as f64 + ncyc as f64 / 2.0) * plan.period;
    let drift = 1.0 + (plan.drift - 1.0) * if plan.duration_ps > 0.0 { mid / plan.duration_ps } else { 0.0 };
    if let Some(index) = &plan.dark_index {
        let count = poisson(&mut rng, plan.dark_total * drift * span_s);
        counters.dark = count;
        for _ in 0..count {
            let pixel = index.sample(&mut rng) as u16;
            let cycle = rng.random_range(0..ncyc);
            let t = rng.random::<f64>() * plan.period;
            events.push(Event { cycle, t, pixel, ..base });
        }
    }
    let count = poisson(&mut rng, plan.ambient_total * span_s);
    counters.ambient = count;
    for _ in 0..count {
        let pixel = rng.random_range(0..plan.num_pixels);
        let cycle = rng.random_range(0..ncyc);
        let t = rng.random::<f64>() * plan.period;
        events.push(Event { cycle, t, pixel, kind: RecordKind::Ambient, ..base });
    }
    for &(pixel, class, rate) in &plan.singles {
        let count = poisson(&mut rng, rate * span_s);
        counters.singles += count;
        for _ in 0..count {
            let cycle = rng.random_range(0..ncyc);
            let t = rng.random::<f64>() * plan.period;
            events.push(Event { cycle, t, pixel, kind: RecordKind::Single, class, ..base });
        }
    }
    for &(class, rate) in &plan.pairs {
        let count = poisson(&mut rng, rate * span_s);
        for _ in 0..count {
            let pair = (block << 32) | counters.pairs;
            counters.pairs += 1;
            let cycle = rng.random_range(0..ncyc);
            let t = rng.random::<f64>() * plan.period;
            let tb = t + normal(&mut rng, plan.corr_sigma) + plan.fiber;
            events.push(Event { cycle, t, pixel: plan.arms.0, kind: RecordKind::PairA, class, pair, ..base });
            events.push(Event { cycle, t: tb, pixel: plan.arms.1, kind: RecordKind::PairB, class, pair, ..base });
        }
    }

    let primaries = events.len();
    for i in 0..primaries {
        let src = events[i];
        let ct = &plan.ct[src.pixel as usize];
        let m = ct.targets.len();
        let mut start = 0;
        while start < m {
            let u: f64 = rng.random();
            let threshold = ct.log_survival[start] + (1.0 - u).ln();
            let j = start + ct.log_survival[start + 1..].partition_point(|&l| l >= threshold);
            if j >= m {
                break;
            }
            let t = src.t + normal(&mut rng, plan.ct_sigma).abs();
            events.push(Event {
                cycle: src.cycle,
                t,
                pixel: ct.targets[j],
                kind: RecordKind::Crosstalk,
                class: NO_CLASS,
                pair: NO_PAIR,
                source: src.pixel,
            });
            counters.ct_spawns += 1;
            start = j + 1;
        }
    }

    let mut emitted: Vec<Emitted> = Vec::with_capacity(events.len());
    for ev in events {
        let t = ev.t + plan.delays[ev.pixel as usize] + normal(&mut rng, plan.jitter);
        if !(0.0..plan.period).contains(&t) {
            counters.dropped += 1;
            continue;
        }
        let (time_ps, raw_code) = match &plan.tdc {
            Some(lut) => {
                let coarse = (t / plan.clock).floor() * plan.clock;
                let code = lut.offsets().partition_point(|&o| o <= t - coarse).saturating_sub(1);
                (coarse as u64, Some(code as u32))
            }
            None => (t.floor() as u64, None),
        };
        emitted.push(Emitted { cycle: ev.cycle, time_ps, raw_code, event: ev });
    }
    emitted.sort_by_key(|e| (e.cycle, e.time_ps, e.event.pixel));
    counters.records = emitted.len() as u64;

    let mut cycles: Vec<AcquisitionCycle> = Vec::new();
    let mut lineage = Vec::new();
    for e in &emitted {
        let index = first + e.cycle as u64;
        if cycles.last().is_none_or(|c| c.cycle_index != index) {
            cycles.push(AcquisitionCycle::new(index, Vec::new()));
        }
        cycles.last_mut().unwrap().records.push(TimestampRecord { pixel: e.event.pixel, time_ps: e.time_ps, raw_code: e.raw_code });
        if plan.lineage {
            let ev = e.event;
            lineage.push(LineageTag {
                cycle_index: index,
                pixel: ev.pixel,
                time_ps: e.time_ps,
                kind: ev.kind,
                class: (ev.class != NO_CLASS).then_some(ev.class),
                pair_id: (ev.pair != NO_PAIR).then_some(ev.pair),
                ct_source: (ev.kind == RecordKind::Crosstalk).then_some(ev.source),
            });
        }
    }
    BlockOutput { cycles, counters, lineage }
}

/// Iterator over the simulated non-empty cycles. Blocks are generated in
/// parallel batches and yielded in order.
pub struct SimCycles {
    plan: Arc<Plan>,
    config: SimConfig,
    next_block: u64,
    buffer: VecDeque<AcquisitionCycle>,
    counters: Counters,
    lineage: Vec<LineageTag>,
}

impl SimCycles {
    pub(super) fn new(config: &SimConfig) -> Self {
        SimCycles {
            plan: Arc::new(Plan::new(config)),
            config: config.clone(),
            next_block: 0,
            buffer: VecDeque::new(),
            counters: Counters::default(),
            lineage: Vec::new(),
        }
    }

    fn refill(&mut self) -> bool {
        let n_blocks = self.plan.n_blocks();
        while self.buffer.is_empty() && self.next_block < n_blocks {
            let batch = (4 * rayon::current_num_threads() as u64).max(4);
            let end = (self.next_block + batch).min(n_blocks);
            let plan = Arc::clone(&self.plan);
            let outputs: Vec<BlockOutput> =
                (self.next_block..end).into_par_iter().map(|b| generate_block(&plan, b)).collect();
            self.next_block = end;
            for out in outputs {
                self.counters.add(&out.counters);
                self.lineage.extend(out.lineage);
                self.buffer.extend(out.cycles);
            }
        }
        !self.buffer.is_empty()
    }

    /// Counters of everything generated so far.
    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Ground truth; counters are complete once the iterator is exhausted.
    pub fn truth(&self) -> Truth {
        Truth {
            schema_version: TRUTH_SCHEMA_VERSION,
            seed: self.config.seed,
            delays_ps: self.config.delays(),
            ct_profile: self.config.ct_profile.clone(),
            fiber_delay_ps: self.config.fiber_delay_ps,
            theoretical_contrast: theoretical_contrast(&self.config.classes()).unwrap_or(f64::NAN),
            tdc_widths_ps: self.config.tdc_widths_ps.clone(),
            counters: self.counters,
            lineage: self.config.record_lineage.then(|| self.lineage.clone()),
        }
    }
}

impl Iterator for SimCycles {
    type Item = AcquisitionCycle;

    fn next(&mut self) -> Option<AcquisitionCycle> {
        if self.buffer.is_empty() && !self.refill() {
            return None;
        }
        self.buffer.pop_front()
    }
}
