//! `cycle_index,pixel,time_ps` text format with an optional header row.

use std::io::{Read, Write};

use super::{AcquisitionCycle, SensorConfig, StreamError, TimestampRecord};

const HEADER: [&str; 3] = ["cycle_index", "pixel", "time_ps"];

/// Parses CSV rows into cycles, applying the same invariants as the binary
/// reader. Rows of one cycle must be contiguous and already sorted.
pub fn read_csv<R: Read>(source: R, sensor: &SensorConfig) -> Result<Vec<AcquisitionCycle>, StreamError> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(::csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut cycles: Vec<AcquisitionCycle> = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| StreamError::Csv {
            line: e.position().map_or(row_no as u64 + 1, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(row_no as u64 + 1, |p| p.line());
        let err = |reason: String| StreamError::Csv { line, reason };
        if row_no == 0 && row.iter().eq(HEADER.iter().copied()) {
            continue;
        }
        if row.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", row.len())));
        }
        let field = |i: usize, name: &str| -> Result<u64, StreamError> {
            row[i].parse::<u64>().map_err(|_| err(format!("invalid {name} {:?}", &row[i])))
        };
        let cycle_index = field(0, "cycle_index")?;
        let pixel = field(1, "pixel")?;
        let time_ps = field(2, "time_ps")?;
        if pixel >= sensor.num_pixels as u64 {
            return Err(err(format!("pixel {pixel} out of range (num_pixels {})", sensor.num_pixels)));
        }
        if time_ps >= sensor.cycle_period_ps {
            return Err(err(format!("time {time_ps} ps outside cycle of {} ps", sensor.cycle_period_ps)));
        }
        let record = TimestampRecord::new(pixel as u16, time_ps);
        match cycles.last_mut() {
            Some(c) if c.cycle_index == cycle_index => {
                let last = c.records.last().expect("cycles are created non-empty");
                if (record.time_ps, record.pixel) < (last.time_ps, last.pixel) {
                    return Err(err("records not sorted by (time_ps, pixel)".into()));
                }
                c.records.push(record);
            }
            Some(c) if c.cycle_index > cycle_index => {
                return Err(err(format!("cycle_index {cycle_index} after {}", c.cycle_index)));
            }
            _ => cycles.push(AcquisitionCycle::new(cycle_index, vec![record])),
        }
    }
    Ok(cycles)
}

/// Writes calibrated records as CSV with a header row. Raw codes and empty
/// cycles have no CSV representation and are dropped.
pub fn write_csv<W: Write>(cycles: &[AcquisitionCycle], sink: W) -> Result<(), StreamError> {
    let mut w = ::csv::Writer::from_writer(sink);
    let csv_err = |e: ::csv::Error| StreamError::Csv { line: 0, reason: e.to_string() };
    w.write_record(HEADER).map_err(csv_err)?;
    for c in cycles {
        for r in &c.records {
            w.write_record(&[c.cycle_index.to_string(), r.pixel.to_string(), r.time_ps.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
