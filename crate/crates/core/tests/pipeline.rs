use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spadkit::coincidence::{Binning, EventIndex};
use spadkit::crosstalk::{ct_probability_indexed, ct_scan, CtOptions};
use spadkit::offset::{measure_offsets, solve_delays};
use spadkit::peakfit::{fit_gaussian, FitData, FitOptions};
use spadkit::rates::{RateReport, SubsetRateCounter, DEFAULT_HOT_THRESHOLD_CPS};
use spadkit::simulator::{simulate, Beam, Bunching, SimConfig, Simulator};
use spadkit::timestream::{write_stream, SensorConfig};

fn index_of(cfg: &SimConfig) -> EventIndex {
    let sim = Simulator::new(cfg.clone()).unwrap();
    let mut index = EventIndex::new(cfg.sensor);
    for c in sim.cycles() {
        index.push_cycle(&c).unwrap();
    }
    index
}

fn small_array(pixels: u16, duration_s: f64) -> SimConfig {
    let mut cfg = SimConfig::new(duration_s);
    cfg.sensor = SensorConfig { num_pixels: pixels, ..SensorConfig::default() };
    cfg
}

#[test]
fn same_seed_same_bytes() {
    let mut cfg = small_array(16, 0.5);
    cfg.ambient_cps = 2_000.0;
    cfg.ct_profile.insert(1, 0.01);
    let bytes = |cfg: &SimConfig| {
        let (stream, truth) = simulate(cfg).unwrap();
        let mut out = Vec::new();
        write_stream(&stream.header, &stream.cycles, &mut out).unwrap();
        (out, truth.counters)
    };
    let (a, ca) = bytes(&cfg);
    let (b, cb) = bytes(&cfg);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    cfg.seed += 1;
    assert_ne!(bytes(&cfg).0, a);
}

#[test]
fn streaming_and_materialized_agree() {
    let mut cfg = small_array(16, 0.2);
    cfg.ambient_cps = 5_000.0;
    let (stream, _) = simulate(&cfg).unwrap();
    let streamed: Vec<_> = Simulator::new(cfg).unwrap().cycles().collect();
    assert_eq!(stream.cycles, streamed);
}

fn chain_config(shift: f64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = small_array(32, 60.0);
    cfg.seed = 11;
    cfg.ambient_cps = 2_000.0;
    cfg.ct_profile.insert(1, 0.005);
    cfg.delays_ps = (0..32).map(|_| rng.random_range(-4_000.0..4_000.0) + shift).collect();
    cfg
}

#[test]
fn recalibrating_a_calibrated_array_finds_nothing_left() {
    let cfg = chain_config(0.0);
    let index = index_of(&cfg);
    let binning = Binning::new(10_000.0, Binning::default().bin_width_ps).unwrap();
    let first = solve_delays(&measure_offsets(&index, binning).unwrap().measurements, 32).unwrap();

    let mut corrected = cfg.clone();
    let mean = cfg.delays_ps.iter().sum::<f64>() / 32.0;
    corrected.delays_ps = cfg.delays_ps.iter().zip(&first.delays_ps).map(|(t, d)| t - mean - d).collect();
    let second_index = index_of(&corrected);
    let second = solve_delays(&measure_offsets(&second_index, binning).unwrap().measurements, 32).unwrap();
    let worst = second.delays_ps.iter().map(|d| d.abs()).fold(0.0, f64::max);
    assert!(worst < 40.0, "residual delay {worst} ps");
}

#[test]
fn common_cable_delay_is_not_observable() {
    let binning = Binning::new(10_000.0, Binning::default().bin_width_ps).unwrap();
    let solve = |cfg: &SimConfig| solve_delays(&measure_offsets(&index_of(cfg), binning).unwrap().measurements, 32).unwrap();
    let base = solve(&chain_config(0.0));
    let shifted = solve(&chain_config(2_500.0));
    for (a, b) in base.delays_ps.iter().zip(&shifted.delays_ps) {
        assert!((a - b).abs() < 40.0, "{a} vs {b}");
    }
    assert!(shifted.delays_ps.iter().sum::<f64>().abs() < 1e-6);
}

fn hot_source(duration_s: f64, seed: u64, ct: f64) -> SimConfig {
    let mut cfg = small_array(16, duration_s);
    cfg.seed = seed;
    cfg.dcr.median_cps = 100.0;
    cfg.dcr.hot_pixels.insert(8, 3.0e4);
    if ct > 0.0 {
        cfg.ct_profile.insert(1, ct);
    }
    cfg
}

#[test]
fn ct_error_shrinks_as_root_n() {
    let err = |duration: f64| {
        let index = index_of(&hot_source(duration, 21, 2e-3));
        ct_probability_indexed(&index, 8, 9, None, &CtOptions::default()).unwrap().error
    };
    let ratio = err(80.0) / err(20.0);
    assert!((ratio - 0.5).abs() < 0.1, "error ratio {ratio}");
}

#[test]
fn no_injected_crosstalk_reads_as_zero() {
    let index = index_of(&hot_source(30.0, 22, 0.0));
    let report = RateReport::from_counts(index.counts(), 30.0, DEFAULT_HOT_THRESHOLD_CPS).unwrap();
    let curve = ct_scan(&index, &report, 6, 1, None, &CtOptions::default()).unwrap();
    for p in &curve.points {
        assert!(p.signed_mean.abs() <= 3.0 * p.stderr, "distance {}: {} +- {}", p.distance, p.signed_mean, p.stderr);
    }
    assert!(curve.estimates.iter().all(|e| e.is_upper_limit()));
}

#[test]
fn scan_clips_at_the_array_edge() {
    let mut cfg = hot_source(5.0, 23, 1e-3);
    cfg.dcr.hot_pixels = [(1, 3.0e4)].into_iter().collect();
    let index = index_of(&cfg);
    let report = RateReport::from_counts(index.counts(), 5.0, DEFAULT_HOT_THRESHOLD_CPS).unwrap();
    let curve = ct_scan(&index, &report, 4, 1, None, &CtOptions::default()).unwrap();
    assert_eq!(curve.points.iter().map(|p| p.n_pairs).collect::<Vec<_>>(), vec![2, 1, 1, 1]);
    assert_eq!(curve.sources.len(), 5);
}

#[test]
fn drifting_dark_rate_shows_in_subsets() {
    let mut cfg = small_array(4, 4.0 * 3600.0);
    cfg.sensor.cycle_period_ps = 1_000_000_000;
    cfg.dcr.median_cps = 100.0;
    cfg.dcr.drift_end_factor = 1.5;
    let sim = Simulator::new(cfg.clone()).unwrap();
    let mut counter = SubsetRateCounter::new(4, cfg.sensor.cycle_period_s(), 0, cfg.total_cycles(), 6).unwrap();
    for c in sim.cycles() {
        counter.push_cycle(&c);
    }
    let report = counter.finish(DEFAULT_HOT_THRESHOLD_CPS).unwrap();
    let medians: Vec<f64> = report.subset_reports.as_ref().unwrap().iter().map(|s| s.report.median_rate_cps).collect();
    assert_eq!(medians.len(), 6);
    assert!(medians.windows(2).all(|w| w[1] > w[0]), "{medians:?}");
    assert!((medians[0] - 104.2).abs() < 2.0 && (medians[5] - 145.8).abs() < 2.0, "{medians:?}");
    assert!((report.median_rate_cps - 125.0).abs() < 1.0);
}

#[test]
fn bunching_peak_fit_is_statistically_sound() {
    let mut cfg = small_array(8, 2.0);
    cfg.seed = 31;
    cfg.beams = vec![Beam { pixel: 2, rate_cps: 2.0e6 }, Beam { pixel: 5, rate_cps: 2.0e6 }];
    cfg.bunching = Bunching { pair_fraction: 2.2e-4, correlation_sigma_ps: 50.0 };
    let h = index_of(&cfg).histogram((2, 5), Binning::default(), None).unwrap().normalize().unwrap();
    let fit = fit_gaussian(&FitData::from_histogram(&h).unwrap(), &FitOptions::default()).unwrap();
    assert!(fit.is_significant());
    assert!((0.85..1.15).contains(&fit.reduced_chi2()), "chi2/dof {}", fit.reduced_chi2());
    assert!(fit.peak.mu.abs() < 5.0 * fit.peak.mu_err);
}
