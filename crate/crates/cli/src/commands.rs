use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use spadkit::calib_tdc::build_lut;
use spadkit::coincidence::{build_histogram, Binning, DeltaHistogram, EventIndex};
use spadkit::crosstalk::{ct_scan, CtCurve, CtOptions};
use spadkit::offset::{measure_offsets, solve_delays};
use spadkit::peakfit::{fit_gaussian, fit_two_peaks, FitData, FitOptions, GaussianFit, TwoPeakFit, FIT_SCHEMA_VERSION};
use spadkit::rates::{compute_rates, compute_rates_with_subsets, RATE_SCHEMA_VERSION};
use spadkit::simulator::{SimConfig, Simulator};
use spadkit::timestream::{write_csv, StreamWriter};

use crate::cli::*;
use crate::io::*;
use crate::svg::{render, Plot, Series};

fn binning(args: &BinningArgs) -> Result<Binning> {
    Ok(Binning::new(args.window, args.bin)?)
}

pub fn simulate(args: &SimulateArgs, run: &mut RunRecord) -> Result<()> {
    run.input(&args.config);
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("cannot read {}", args.config.display()))?;
    let mut config = SimConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(d) = args.duration {
        config.duration_s = d;
    }
    let sim = Simulator::new(config.clone())?;
    run.config = serde_json::to_value(&config)?;
    run.seed = Some(config.seed);

    let mut cycles = sim.cycles();
    if is_csv(&args.out) {
        let all: Vec<_> = cycles.by_ref().collect();
        if config.tdc_widths_ps.is_some() {
            log::warn!("CSV output drops raw TDC codes");
        }
        write_csv(&all, create_file(&args.out)?)?;
    } else {
        let mut w = StreamWriter::new(create_file(&args.out)?, &sim.header(), None)?;
        for c in cycles.by_ref() {
            w.write_cycle(&c)?;
        }
        w.finish()?;
    }
    run.output(&args.out);
    let truth = cycles.truth();
    log::info!("simulated {} records", truth.counters.records);
    if let Some(path) = &args.truth {
        write_json(path, &truth)?;
        run.output(path);
    }
    Ok(())
}

pub fn lut(args: &LutArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    run.config = json!({"min_counts": args.min_counts});
    let stream = load_stream(&args.input)?;
    let lut = build_lut(&stream.cycles, stream.sensor(), args.min_counts)?;
    write_json(&args.out, &lut.to_json())?;
    run.output(&args.out);
    let unusable = lut.unusable_pixels();
    if !unusable.is_empty() {
        run.degraded = Some(format!("{} pixels could not be calibrated: {unusable:?}", unusable.len()));
    }
    Ok(())
}

pub fn dcr(args: &DcrArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    run.config = json!({"subsets": args.subsets, "hot_threshold_cps": args.hot_threshold, "duration_s": args.duration});
    let stream = load_stream(&args.input)?;
    let report = if args.subsets > 1 {
        if args.duration.is_some() {
            bail!("--duration cannot be combined with --subsets");
        }
        compute_rates_with_subsets(&stream, args.subsets, args.hot_threshold)?
    } else {
        compute_rates(&stream, args.duration, args.hot_threshold)?
    };
    log::info!("median {:.2} cps, {} hot pixels", report.median_rate_cps, report.hot_pixels.len());
    if is_csv(&args.out) {
        let hot: Vec<u16> = report.hot_pixels.iter().map(|h| h.pixel).collect();
        let rows = report.counts.iter().zip(&report.rates_cps).enumerate().map(|(p, (c, r))| {
            vec![p.to_string(), c.to_string(), r.to_string(), hot.contains(&(p as u16)).to_string()]
        });
        write_rows(&args.out, &["pixel", "counts", "rate_cps", "hot"], rows)?;
    } else {
        write_json(&args.out, &versioned(&report, RATE_SCHEMA_VERSION)?)?;
    }
    run.output(&args.out);
    Ok(())
}

fn normalized(h: DeltaHistogram) -> DeltaHistogram {
    match h.clone().normalize() {
        Ok(n) => n,
        Err(e) => {
            log::warn!("histogram left unnormalized: {e}");
            h
        }
    }
}

fn histogram_plot(h: &DeltaHistogram, title: String, models: Vec<Series>) -> Plot {
    let data = h.centers().into_iter().zip(h.values()).collect();
    let mut series = vec![Series::line("data", "#444444", data)];
    series.extend(models);
    Plot {
        title,
        x_label: "time difference (ps)".into(),
        y_label: if h.normalized.is_some() { "normalized coincidences" } else { "coincidences" }.into(),
        log_y: false,
        series,
    }
}

pub fn coincidence(args: &CoincidenceArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    let binning = binning(&args.binning)?;
    run.config = json!({"pair": args.pair, "binning": binning, "delays": args.delays});
    let stream = load_stream(&args.input)?;
    let delays = load_delays(args.delays.as_ref())?;
    if let Some(p) = &args.delays {
        run.input(p);
    }
    let h = build_histogram(&stream, args.pair, binning, delays.as_ref().map(|d| d.delays_ps.as_slice()))?;
    log::info!("{} pairs in window", h.total_pairs);
    let h = normalized(h);
    if is_csv(&args.out) {
        let edges = binning.edges();
        let values = h.values();
        let rows = h.counts.iter().enumerate().map(|(i, c)| {
            vec![edges[i].to_string(), edges[i + 1].to_string(), c.to_string(), values[i].to_string()]
        });
        write_rows(&args.out, &["left_ps", "right_ps", "count", "value"], rows)?;
    } else {
        write_json(&args.out, &h.to_json())?;
    }
    run.output(&args.out);
    if let Some(svg) = &args.svg {
        let title = format!("pixels {} and {}", args.pair.0, args.pair.1);
        write_text(svg, &render(&histogram_plot(&h, title, vec![])))?;
        run.output(svg);
    }
    Ok(())
}

enum Fitted {
    One(GaussianFit),
    Two(TwoPeakFit),
}

impl Fitted {
    fn model(&self, x: f64) -> f64 {
        match self {
            Fitted::One(f) => f.model(x),
            Fitted::Two(f) => f.model(x),
        }
    }

    fn to_json(&self, h: &DeltaHistogram) -> Result<serde_json::Value> {
        let (name, mut v) = match self {
            Fitted::One(f) => ("gaussian", versioned(f, FIT_SCHEMA_VERSION)?),
            Fitted::Two(f) => {
                let mut v = versioned(f, FIT_SCHEMA_VERSION)?;
                v["separation_ps"] = f.separation().into();
                v["separation_err_ps"] = f.separation_err().into();
                ("two_peaks", v)
            }
        };
        v["model"] = name.into();
        v["pair"] = json!([h.pixel_a, h.pixel_b]);
        Ok(v)
    }

    fn overlay(&self, h: &DeltaHistogram) -> Series {
        let left = h.binning.left_edge();
        let span = -2.0 * left;
        let points = (0..=2_000).map(|i| left + span * i as f64 / 2_000.0).map(|x| (x, self.model(x))).collect();
        Series::line("fit", "#cc2222", points)
    }
}

pub fn fit(args: &FitArgs, run: &mut RunRecord) -> Result<()> {
    run.input(&args.input);
    run.config = json!({"two_peaks": args.two_peaks, "hint_ps": args.hint});
    let h = load_histogram(&args.input)?;
    let data = FitData::from_histogram(&h)?;
    let fitted = match args.hint.filter(|_| args.two_peaks) {
        Some(hint) => Fitted::Two(fit_two_peaks(&data, hint)?),
        None => Fitted::One(fit_gaussian(&data, &FitOptions::default())?),
    };
    write_json(&args.out, &fitted.to_json(&h)?)?;
    run.output(&args.out);
    if let Some(svg) = &args.svg {
        let title = format!("pixels {} and {}", h.pixel_a, h.pixel_b);
        write_text(svg, &render(&histogram_plot(&h, title, vec![fitted.overlay(&h)])))?;
        run.output(svg);
    }
    Ok(())
}

fn ct_plot(curve: &CtCurve) -> Plot {
    let shown: Vec<_> = curve.points.iter().filter(|p| p.signed_mean > 0.0).collect();
    Plot {
        title: "cross-talk probability".into(),
        x_label: "pixel distance".into(),
        y_label: "probability".into(),
        log_y: true,
        series: vec![Series::markers(
            "mean over pairs",
            "#1f4e9c",
            shown.iter().map(|p| (p.distance as f64, p.signed_mean)).collect(),
            Some(shown.iter().map(|p| p.stderr).collect()),
        )],
    }
}

pub fn ct_scan_cmd(args: &CtScanArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    let opts = CtOptions { binning: binning(&args.binning)?, ..CtOptions::default() };
    run.config = json!({"d_max": args.dmax, "n_hot": args.nhot, "hot_threshold_cps": args.hot_threshold, "options": opts, "delays": args.delays});
    let stream = load_stream(&args.input)?;
    let delays = load_delays(args.delays.as_ref())?;
    if let Some(p) = &args.delays {
        run.input(p);
    }
    let rates = compute_rates(&stream, None, args.hot_threshold)?;
    let index = EventIndex::from_stream(&stream)?;
    drop(stream);
    let curve = ct_scan(&index, &rates, args.dmax, args.nhot, delays.as_ref().map(|d| d.delays_ps.as_slice()), &opts)?;
    if is_csv(&args.out) {
        let rows = curve.points.iter().map(|p| {
            vec![p.distance.to_string(), p.mean.to_string(), p.signed_mean.to_string(), p.stderr.to_string(), p.n_pairs.to_string()]
        });
        write_rows(&args.out, &["distance", "mean", "signed_mean", "stderr", "n_pairs"], rows)?;
    } else {
        write_json(&args.out, &curve.to_json())?;
    }
    run.output(&args.out);
    if let Some(svg) = &args.svg {
        write_text(svg, &render(&ct_plot(&curve)))?;
        run.output(svg);
    }
    Ok(())
}

pub fn calibrate(args: &CalibrateArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    let binning = binning(&args.binning)?;
    run.config = json!({"binning": binning});
    let stream = load_stream(&args.input)?;
    let n = stream.sensor().num_pixels;
    let index = EventIndex::from_stream(&stream)?;
    drop(stream);
    let report = measure_offsets(&index, binning)?;
    let delays = solve_delays(&report.measurements, n)?;
    write_json(&args.out, &delays.to_json())?;
    run.output(&args.out);
    if report.degraded || delays.has_gaps() {
        run.degraded = Some(format!(
            "{} of {} adjacent pairs without a usable offset, joined at zero: {:?}",
            report.invalid,
            report.measurements.len(),
            delays.gap_pixels
        ));
    }
    Ok(())
}

pub fn report(args: &ReportArgs, run: &mut RunRecord) -> Result<()> {
    run.inputs_of(&args.input);
    let binning = binning(&args.binning)?;
    run.config = json!({"pair": args.pair, "hint_ps": args.hint, "binning": binning, "delays": args.delays});
    let stream = load_stream(&args.input)?;
    let delays = load_delays(args.delays.as_ref())?;
    if let Some(p) = &args.delays {
        run.input(p);
    }
    let h = normalized(build_histogram(&stream, args.pair, binning, delays.as_ref().map(|d| d.delays_ps.as_slice()))?);
    let rates = compute_rates(&stream, None, f64::INFINITY)?;
    let data = FitData::from_histogram(&h)?;
    let fitted = match fit_two_peaks(&data, args.hint) {
        Ok(f) => Fitted::Two(f),
        Err(e) => {
            run.degraded = Some(format!("two-peak fit failed ({e}); single Gaussian reported"));
            Fitted::One(fit_gaussian(&data, &FitOptions::default())?)
        }
    };

    let dir: &Path = &args.out;
    let files = [dir.join("histogram.json"), dir.join("fit.json"), dir.join("histogram.svg"), dir.join("report.json")];
    write_json(&files[0], &h.to_json())?;
    let fit_json = fitted.to_json(&h)?;
    write_json(&files[1], &fit_json)?;
    let title = format!("pixels {} and {}", args.pair.0, args.pair.1);
    write_text(&files[2], &render(&histogram_plot(&h, title, vec![fitted.overlay(&h)])))?;
    let (a, b) = (args.pair.0 as usize, args.pair.1 as usize);
    let summary = json!({
        "schema_version": FIT_SCHEMA_VERSION,
        "pair": args.pair,
        "duration_s": rates.duration_s,
        "rates_cps": [rates.rates_cps[a], rates.rates_cps[b]],
        "total_pairs": h.total_pairs,
        "delays_applied": delays.is_some(),
        "fit": fit_json,
        "degraded": run.degraded,
    });
    write_json(&files[3], &summary)?;
    for f in &files {
        run.output(f);
    }
    Ok(())
}
