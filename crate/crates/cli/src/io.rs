//! File loading, output writing and run manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use spadkit::calib_tdc::{LutJson, TdcLut};
use spadkit::coincidence::DeltaHistogram;
use spadkit::offset::DelayVector;
use spadkit::timestream::{read_csv, read_stream, SensorConfig, Stream, StreamHeader};

use crate::cli::StreamInput;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

pub fn read_json(path: &Path) -> Result<Value> {
    serde_json::from_reader(open(path)?).with_context(|| format!("{} is not valid JSON", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

/// Adds `schema_version` to a serialized object.
pub fn versioned(value: &impl Serialize, version: u32) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("schema_version".into(), version.into());
    }
    Ok(v)
}

/// Loads a stream, converting raw codes when a LUT is given.
pub fn load_stream(input: &StreamInput) -> Result<Stream> {
    let path = &input.input;
    let stream = if is_csv(path) {
        let sensor: SensorConfig = match &input.sensor {
            Some(p) => serde_json::from_value(read_json(p)?).with_context(|| format!("bad sensor description in {}", p.display()))?,
            None => SensorConfig::default(),
        };
        let cycles = read_csv(open(path)?, &sensor).with_context(|| format!("cannot read {}", path.display()))?;
        Stream::new(StreamHeader::new(sensor), cycles)
    } else {
        read_stream(open(path)?).with_context(|| format!("cannot read {}", path.display()))?
    };
    log::info!("{}: {} cycles, {} records", path.display(), stream.cycles.len(), stream.record_count());
    let Some(lut_path) = &input.lut else {
        if stream.cycles.iter().flat_map(|c| &c.records).any(|r| r.raw_code.is_some()) {
            log::warn!("stream carries raw TDC codes but no --lut was given; using coarse times");
        }
        return Ok(stream);
    };
    let lut = load_lut(lut_path)?;
    lut.check_sensor(stream.sensor())?;
    let cycles = lut.apply(&stream.cycles)?;
    Ok(Stream::new(stream.header, cycles))
}

pub fn load_lut(path: &Path) -> Result<TdcLut> {
    let json: LutJson = serde_json::from_value(read_json(path)?).with_context(|| format!("bad LUT in {}", path.display()))?;
    Ok(TdcLut::from_json(json)?)
}

pub fn load_delays(path: Option<&PathBuf>) -> Result<Option<DelayVector>> {
    path.map(|p| DelayVector::from_json(&read_json(p)?).with_context(|| format!("bad delays in {}", p.display())))
        .transpose()
}

pub fn load_histogram(path: &Path) -> Result<DeltaHistogram> {
    DeltaHistogram::from_json(&read_json(path)?).with_context(|| format!("bad histogram in {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub bytes: u64,
}

impl FileEntry {
    fn of(path: &Path) -> FileEntry {
        FileEntry { path: path.to_path_buf(), bytes: std::fs::metadata(path).map_or(0, |m| m.len()) }
    }
}

/// Record of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub status: String,
}

/// What a command did, for the manifest and exit status.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Where the manifest goes.
    pub manifest: PathBuf,
    pub seed: Option<u64>,
    pub degraded: Option<String>,
}

impl RunRecord {
    pub fn new(manifest_for: &Path) -> Self {
        let mut name = manifest_for.as_os_str().to_owned();
        name.push(".manifest.json");
        RunRecord { manifest: PathBuf::from(name), ..Default::default() }
    }

    pub fn in_dir(dir: &Path) -> Self {
        RunRecord { manifest: dir.join("manifest.json"), ..Default::default() }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn inputs_of(&mut self, input: &StreamInput) {
        self.input(&input.input);
        for p in input.sensor.iter().chain(&input.lut) {
            self.input(p);
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write_manifest(&self, subcommand: &str, argv: Vec<String>, wall_time_s: f64) -> Result<()> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            argv,
            config: self.config.clone(),
            inputs: self.inputs.iter().map(|p| FileEntry::of(p)).collect(),
            outputs: self.outputs.iter().map(|p| FileEntry::of(p)).collect(),
            seed: self.seed,
            wall_time_s,
            status: if self.degraded.is_some() { "degraded" } else { "ok" }.into(),
        };
        write_json(&self.manifest, &manifest)
    }
}
