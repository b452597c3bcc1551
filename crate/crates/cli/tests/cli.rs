use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn spadkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spadkit")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn manifest_of(path: &Path) -> Value {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    read_json(Path::new(&name))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, value: Value) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
        p
    }

    fn simulate(&self, config: &Path, out: &str, seed: &str) -> PathBuf {
        let p = self.path(out);
        let o = spadkit(&["simulate", "--config", s(config), "--seed", seed, "--out", s(&p)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        p
    }
}

fn sensor16() -> Value {
    json!({"num_pixels": 16, "cycle_period_ps": 4_000_000, "tdc_bins_per_clock": 140, "clock_period_ps": 2500})
}

#[test]
fn usage_errors_exit_with_one() {
    let o = spadkit(&["dcr", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&spadkit(&["frobnicate"])), 1);
    assert_eq!(code(&spadkit(&["coincidence", "--in", "x.spk1", "--pair", "3", "--out", "h.json"])), 1);
    assert_eq!(code(&spadkit(&["fit", "--in", "h.json", "--two-peaks", "--out", "f.json"])), 1);
    assert_eq!(code(&spadkit(&["--help"])), 0);
}

#[test]
fn simulate_is_deterministic() {
    let ws = Workspace::new();
    let cfg = ws.config("c.json", json!({"sensor": sensor16(), "duration_s": 0.5, "ambient_cps": 3000.0, "ct_profile": {"1": 0.01}}));
    let a = ws.simulate(&cfg, "a.spk1", "7");
    let b = ws.simulate(&cfg, "b.spk1", "7");
    let c = ws.simulate(&cfg, "c.spk1", "8");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let m = manifest_of(&a);
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["status"], "ok");
}

#[test]
fn fit_on_empty_input_is_a_data_error() {
    let ws = Workspace::new();
    let empty = ws.path("empty.json");
    std::fs::write(&empty, "").unwrap();
    let o = spadkit(&["fit", "--in", s(&empty), "--out", s(&ws.path("f.json"))]);
    assert_eq!(code(&o), 2);
    let msg: Value = serde_json::from_slice(o.stderr.split(|&b| b == b'\n').rfind(|l| !l.is_empty()).unwrap()).unwrap();
    assert_eq!(msg["status"], "error");
    assert_eq!(msg["subcommand"], "fit");

    let zeros = ws.config(
        "zeros.json",
        json!({"schema_version": 1, "pixel_a": 0, "pixel_b": 1, "window_ps": 500.0, "bin_width_ps": 50.0,
               "edges_ps": (0..=20).map(|i| -500.0 + 50.0 * i as f64).collect::<Vec<_>>(), "counts": vec![0; 20], "total_pairs": 0}),
    );
    assert_eq!(code(&spadkit(&["fit", "--in", s(&zeros), "--out", s(&ws.path("g.json"))])), 2);
}

#[test]
fn calibrate_then_report_recovers_the_setup() {
    let ws = Workspace::new();
    let delays: Vec<f64> = (0..16).map(|i| ((i * 7919) % 13) as f64 * 400.0 - 2_400.0).collect();
    let cfg = ws.config(
        "c.json",
        json!({
            "sensor": sensor16(), "seed": 3, "duration_s": 25.0, "ambient_cps": 2000.0,
            "beams": [{"pixel": 5, "rate_cps": 2.0e5}, {"pixel": 8, "rate_cps": 2.0e5}],
            "bunching": {"pair_fraction": 1.9e-5, "correlation_sigma_ps": 50.0},
            "fiber_delay_ps": 5000.0,
            "ct_profile": {"1": 0.005, "2": 0.002, "3": 0.002},
            "delays_ps": delays,
        }),
    );
    let stream = ws.simulate(&cfg, "s.spk1", "3");

    let d = ws.path("delays.json");
    let o = spadkit(&["calibrate", "--in", s(&stream), "--out", s(&d), "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dj = read_json(&d);
    assert_eq!(dj["schema_version"], 1);
    let mean = delays.iter().sum::<f64>() / 16.0;
    for (p, t) in delays.iter().enumerate() {
        let got = dj["delays_ps"][p.to_string()].as_f64().unwrap();
        assert!((got - (t - mean)).abs() < 60.0, "pixel {p}: {got} vs {}", t - mean);
    }

    let report = ws.path("report");
    let o = spadkit(&["report", "--in", s(&stream), "--delays", s(&d), "--pair", "5,8", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["histogram.json", "fit.json", "histogram.svg", "report.json", "manifest.json"] {
        assert!(report.join(f).exists(), "{f} missing");
    }
    let fit = read_json(&report.join("fit.json"));
    assert_eq!(fit["model"], "two_peaks");
    let sep = fit["separation_ps"].as_f64().unwrap();
    let err = fit["separation_err_ps"].as_f64().unwrap();
    assert!((sep - 5_000.0).abs() < 3.0 * err + 30.0, "separation {sep} +- {err}");
    let svg = std::fs::read_to_string(report.join("histogram.svg")).unwrap();
    assert!(svg.contains("<polyline"));
    let m = read_json(&report.join("manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn calibration_gap_is_degraded_but_written() {
    let ws = Workspace::new();
    let mut delays = vec![0.0; 16];
    delays[15] = 8_000.0;
    let cfg = ws.config(
        "c.json",
        json!({"sensor": sensor16(), "duration_s": 10.0, "ambient_cps": 2000.0, "ct_profile": {"1": 0.01}, "delays_ps": delays}),
    );
    let stream = ws.simulate(&cfg, "s.spk1", "4");
    let d = ws.path("delays.json");
    let o = spadkit(&["calibrate", "--in", s(&stream), "--window", "2000", "--out", s(&d)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&d)["gap_pixels"], json!([[14, 15]]));
    assert_eq!(manifest_of(&d)["status"], "degraded");
}

#[test]
fn rates_coincidences_and_ct_scan() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "c.json",
        json!({"sensor": sensor16(), "duration_s": 6.0, "dcr": {"median_cps": 100.0, "hot_pixels": {"4": 3.0e4, "11": 2.0e4}},
               "ct_profile": {"1": 0.003, "2": 5e-4}}),
    );
    let stream = ws.simulate(&cfg, "s.spk1", "5");

    let report = ws.path("dcr.json");
    assert_eq!(code(&spadkit(&["dcr", "--in", s(&stream), "--subsets", "3", "--out", s(&report)])), 0);
    let r = read_json(&report);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["hot_pixels"].as_array().unwrap().len(), 2);
    assert_eq!(r["subset_reports"].as_array().unwrap().len(), 3);
    let table = ws.path("dcr.csv");
    assert_eq!(code(&spadkit(&["dcr", "--in", s(&stream), "--out", s(&table)])), 0);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 17);

    let h = ws.path("h.json");
    let o = spadkit(&["coincidence", "--in", s(&stream), "--pair", "4,5", "--window", "2000", "--bin", "50", "--out", s(&h), "--svg", s(&ws.path("h.svg"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let f = ws.path("f.json");
    assert_eq!(code(&spadkit(&["fit", "--in", s(&h), "--out", s(&f), "--svg", s(&ws.path("f.svg"))])), 0);
    let fit = read_json(&f);
    assert_eq!(fit["model"], "gaussian");
    assert_eq!(fit["status"], "significant");
    assert!(fit["mu"].as_f64().unwrap().abs() < 100.0);
    assert!(ws.path("f.svg").exists() && ws.path("h.svg").exists());

    let ct = ws.path("ct.json");
    let o = spadkit(&["ct-scan", "--in", s(&stream), "--dmax", "3", "--nhot", "2", "--out", s(&ct), "--svg", s(&ws.path("ct.svg"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = read_json(&ct);
    let p1 = &c["distances"]["1"];
    assert_eq!(p1["n_pairs"], 4);
    let (m, e) = (p1["mean"].as_f64().unwrap(), p1["stderr"].as_f64().unwrap());
    assert!((m - 0.003).abs() < 4.0 * e, "{m} +- {e}");
    assert!(std::fs::read_to_string(ws.path("ct.svg")).unwrap().contains("<circle"));
}

#[test]
fn csv_input_is_read_by_extension() {
    let ws = Workspace::new();
    let sensor = ws.config("sensor.json", json!({"num_pixels": 4, "cycle_period_ps": 100_000, "tdc_bins_per_clock": 140, "clock_period_ps": 2500}));
    let csv = ws.path("s.csv");
    std::fs::write(&csv, "cycle_index,pixel,time_ps\n0,0,1000\n0,1,1300\n3,0,500\n3,1,800\n").unwrap();
    let h = ws.path("h.json");
    let o = spadkit(&["coincidence", "--in", s(&csv), "--sensor", s(&sensor), "--pair", "0,1", "--window", "1000", "--bin", "100", "--out", s(&h)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&h)["total_pairs"], 2);
    let o = spadkit(&["coincidence", "--in", s(&csv), "--sensor", s(&sensor), "--pair", "0,9", "--out", s(&h)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lut_from_raw_codes() {
    let ws = Workspace::new();
    let widths: Vec<f64> = (0..140).map(|c| if c % 2 == 0 { 12.0 } else { 2500.0 / 70.0 - 12.0 }).collect();
    let cfg = ws.config(
        "c.json",
        json!({"sensor": {"num_pixels": 4, "cycle_period_ps": 4_000_000, "tdc_bins_per_clock": 140, "clock_period_ps": 2500},
               "duration_s": 2.0, "ambient_cps": 2.0e4, "tdc_widths_ps": widths}),
    );
    let stream = ws.simulate(&cfg, "raw.spk1", "6");
    let lut = ws.path("lut.json");
    let o = spadkit(&["lut", "--in", s(&stream), "--out", s(&lut)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&lut);
    let w0: Vec<f64> = j["widths_ps"]["0"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((w0.iter().sum::<f64>() - 2500.0).abs() < 1e-6);
    assert!(w0[0] < w0[1]);
    let o = spadkit(&["dcr", "--in", s(&stream), "--lut", s(&lut), "--out", s(&ws.path("r.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
