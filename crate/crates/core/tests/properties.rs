use proptest::prelude::*;

use nalgebra::{DMatrix, DVector};
use spadkit::calib_tdc::{CodeDensity, PixelLut};
use spadkit::coincidence::{build_histogram, Binning, EventIndex};
use spadkit::offset::{apply_delays, histogram_corrected, solve_delays, DelayVector, OffsetMeasurement};
use spadkit::peakfit::{fit_gaussian, gaussian, FitData, FitOptions};
use spadkit::rates::{median, split_subsets, RateCounter};
use spadkit::timestream::{
    read_csv, read_stream, write_csv, write_stream, AcquisitionCycle, SensorConfig, Stream, StreamHeader,
    TimestampRecord,
};

const PIXELS: u16 = 8;

fn sensor() -> SensorConfig {
    SensorConfig { num_pixels: PIXELS, ..SensorConfig::default() }
}

fn cycles(raw: bool) -> impl Strategy<Value = Vec<AcquisitionCycle>> {
    let record = (0..PIXELS, 0u64..20_000, proptest::option::of(any::<u32>())).prop_map(move |(p, t, code)| match code {
        Some(c) if raw => TimestampRecord::raw(p, t, c),
        _ => TimestampRecord::new(p, t),
    });
    proptest::collection::vec((1u64..5, proptest::collection::vec(record, 0..12)), 0..16).prop_map(|parts| {
        let mut index = 0;
        parts
            .into_iter()
            .map(|(gap, recs)| {
                index += gap;
                AcquisitionCycle::from_unsorted(index, recs)
            })
            .collect()
    })
}

fn stream(cycles: Vec<AcquisitionCycle>) -> Stream {
    Stream::new(StreamHeader::new(sensor()), cycles)
}

fn odd_binning() -> Binning {
    Binning::new(1_050.0, 100.0).unwrap()
}

proptest! {
    #[test]
    fn binary_round_trip(cs in cycles(true)) {
        let header = StreamHeader::new(sensor()).with_metadata("run", "p");
        let mut bytes = Vec::new();
        write_stream(&header, &cs, &mut bytes).unwrap();
        let back = read_stream(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.header, header);
        prop_assert_eq!(back.cycles, cs);
    }

    #[test]
    fn csv_and_binary_agree(cs in cycles(false)) {
        let mut text = Vec::new();
        write_csv(&cs, &mut text).unwrap();
        let from_csv = read_csv(text.as_slice(), &sensor()).unwrap();
        let non_empty: Vec<_> = cs.into_iter().filter(|c| !c.records.is_empty()).collect();
        prop_assert_eq!(from_csv, non_empty);
    }

    #[test]
    fn reader_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = read_stream(bytes.as_slice());
        let mut prefixed = b"SPK1\x01\x00".to_vec();
        prefixed.extend(&bytes);
        let _ = read_stream(prefixed.as_slice());
    }

    #[test]
    fn swapping_the_pair_mirrors_the_histogram(cs in cycles(false), a in 0..PIXELS, b in 0..PIXELS) {
        prop_assume!(a != b);
        let s = stream(cs);
        let ab = build_histogram(&s, (a, b), odd_binning(), None).unwrap();
        let ba = build_histogram(&s, (b, a), odd_binning(), None).unwrap();
        prop_assert_eq!(ab.mirrored(), ba);
    }

    #[test]
    fn cycles_never_pair_across(cs in cycles(false)) {
        let s = stream(cs.clone());
        let whole = build_histogram(&s, (0, 1), odd_binning(), None).unwrap();
        let mut sum = build_histogram(&stream(vec![]), (0, 1), odd_binning(), None).unwrap();
        for c in cs {
            sum.merge(&build_histogram(&stream(vec![c]), (0, 1), odd_binning(), None).unwrap());
        }
        prop_assert_eq!(whole, sum);
    }

    #[test]
    fn other_pixels_do_not_matter(cs in cycles(false)) {
        let s = stream(cs.clone());
        let only: Vec<_> = cs
            .into_iter()
            .map(|c| AcquisitionCycle::new(c.cycle_index, c.records.into_iter().filter(|r| r.pixel < 2).collect()))
            .collect();
        prop_assert_eq!(
            build_histogram(&s, (0, 1), odd_binning(), None).unwrap(),
            build_histogram(&stream(only), (0, 1), odd_binning(), None).unwrap()
        );
    }

    #[test]
    fn common_delay_shift_is_invisible(cs in cycles(false), d in proptest::collection::vec(-3_000i32..3_000, 8), c in -10_000i32..10_000) {
        let s = stream(cs);
        let base: Vec<f64> = d.iter().map(|&x| x as f64).collect();
        let shifted: Vec<f64> = d.iter().map(|&x| (x + c) as f64).collect();
        prop_assert_eq!(
            build_histogram(&s, (2, 5), odd_binning(), Some(&base)).unwrap(),
            build_histogram(&s, (2, 5), odd_binning(), Some(&shifted)).unwrap()
        );
    }

    #[test]
    fn index_matches_direct_scan(cs in cycles(false), d in proptest::collection::vec(-3_000.0f64..3_000.0, 8)) {
        let s = stream(cs);
        let index = EventIndex::from_stream(&s).unwrap();
        let binning = Binning::default();
        for pair in [(0, 1), (3, 2), (7, 4)] {
            prop_assert_eq!(index.histogram(pair, binning, None).unwrap(), build_histogram(&s, pair, binning, None).unwrap());
            prop_assert_eq!(index.histogram(pair, binning, Some(&d)).unwrap(), build_histogram(&s, pair, binning, Some(&d)).unwrap());
        }
    }

    #[test]
    fn corrected_stream_matches_delay_parameter(cs in cycles(false), d in proptest::collection::vec(-3_000.0f64..3_000.0, 8)) {
        let s = stream(cs);
        let mut dv = DelayVector::zeros(PIXELS);
        dv.delays_ps = d.clone();
        let corrected = apply_delays(&s, &dv).unwrap();
        prop_assert_eq!(
            histogram_corrected(&corrected, (1, 6), Binning::default()).unwrap(),
            build_histogram(&s, (1, 6), Binning::default(), Some(&d)).unwrap()
        );
    }

    #[test]
    fn subsets_conserve_counts(cs in cycles(false), n in 1usize..5) {
        let s = stream(cs);
        prop_assume!(s.acquired_cycles() >= n as u64);
        let mut whole = RateCounter::new(PIXELS);
        s.cycles.iter().for_each(|c| whole.push_cycle(c));
        let mut parts = RateCounter::new(PIXELS);
        let mut cycles_total = 0;
        for sub in split_subsets(&s, n).unwrap() {
            cycles_total += sub.acquired_cycles();
            sub.cycles.iter().for_each(|c| parts.push_cycle(c));
        }
        prop_assert_eq!(whole.counts(), parts.counts());
        prop_assert_eq!(cycles_total, s.acquired_cycles());
    }

    #[test]
    fn median_ignores_order(mut v in proptest::collection::vec(-1e6f64..1e6, 1..50), seed in any::<u64>()) {
        let m = median(&v);
        let k = (seed % v.len() as u64) as usize;
        v.rotate_left(k);
        v.reverse();
        prop_assert_eq!(median(&v), m);
    }

    #[test]
    fn lut_widths_partition_the_clock(counts in proptest::collection::vec(0u32..500, 140)) {
        let s = sensor();
        let mut density = CodeDensity::new(s);
        let recs: Vec<_> = counts
            .iter()
            .enumerate()
            .flat_map(|(code, &n)| std::iter::repeat_n(TimestampRecord::raw(0, 0, code as u32), n as usize))
            .collect();
        density.push_cycle(&AcquisitionCycle::from_unsorted(0, recs)).unwrap();
        let lut = density.finish(1);
        if let Some(px) = lut.pixel(0) {
            let total: f64 = px.widths().iter().sum();
            prop_assert!((total - s.clock_period_ps as f64).abs() < 1e-6);
            prop_assert!(px.widths().iter().all(|&w| w > 0.0));
            prop_assert!(px.offsets().windows(2).all(|w| w[1] > w[0]));
            for c in 0..140 {
                let m = px.midpoint(c);
                prop_assert!(m > px.offsets()[c] && m < px.offsets()[c] + px.widths()[c]);
            }
        }
        let rebuilt = PixelLut::from_widths(vec![s.clock_period_ps as f64 / 140.0; 140]);
        prop_assert!((rebuilt.offsets()[139] + rebuilt.widths()[139] - s.clock_period_ps as f64).abs() < 1e-9);
    }

    #[test]
    fn chain_solve_matches_dense_solve(offs in proptest::collection::vec(-5_000.0f64..5_000.0, 1..40)) {
        let n = offs.len() + 1;
        let m: Vec<_> = offs
            .iter()
            .enumerate()
            .map(|(i, &o)| OffsetMeasurement { i: i as u16, j: i as u16 + 1, offset_ps: o, sigma_ps: 1.0, valid: true })
            .collect();
        let d = solve_delays(&m, n as u16).unwrap().delays_ps;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (i, &o) in offs.iter().enumerate() {
            a[(i, i)] = 1.0;
            a[(i, i + 1)] = -1.0;
            b[i] = o;
        }
        a.row_mut(n - 1).fill(1.0);
        let dense = a.lu().solve(&b).unwrap();
        for i in 0..n {
            prop_assert!((dense[i] - d[i]).abs() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fit_follows_shift_and_scale(shift in -2_000.0f64..2_000.0, scale in 0.1f64..50.0, amp in 300.0f64..3_000.0, sigma in 120.0f64..400.0) {
        let x: Vec<f64> = (0..160).map(|i| -4_000.0 + i as f64 * 50.0).collect();
        let wobble = |i: usize| ((i * 7919) % 13) as f64 - 6.0;
        let y: Vec<f64> = x.iter().enumerate().map(|(i, &x)| gaussian(x, 1e4, amp, 150.0, sigma) + 10.0 * wobble(i)).collect();
        let var: Vec<f64> = y.clone();
        let base = fit_gaussian(&FitData::new(x.clone(), y.clone(), var.clone()).unwrap(), &FitOptions::default()).unwrap();

        let xs = x.iter().map(|v| v + shift).collect();
        let ys = y.iter().map(|v| v * scale).collect();
        let vs = var.iter().map(|v| v * scale * scale).collect();
        let moved = fit_gaussian(&FitData::new(xs, ys, vs).unwrap(), &FitOptions::default()).unwrap();

        let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * b.abs().max(1.0);
        prop_assert!(close(moved.bg, base.bg * scale, 1e-5));
        prop_assert!(close(moved.peak.amp, base.peak.amp * scale, 1e-4));
        prop_assert!((moved.peak.mu - base.peak.mu - shift).abs() < 1e-2);
        prop_assert!(close(moved.peak.sigma, base.peak.sigma, 1e-4));
        prop_assert!(close(moved.peak.amp_err, base.peak.amp_err * scale, 1e-3));
        prop_assert!(close(moved.peak.mu_err, base.peak.mu_err, 1e-3));
        prop_assert!(close(moved.peak.contrast, base.peak.contrast, 1e-4));
        prop_assert!(close(moved.chi2, base.chi2, 1e-4));
    }
}
