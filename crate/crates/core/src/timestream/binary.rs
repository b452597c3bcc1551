//! The little-endian "SPK1" container.
//!
//! ```text
//! header:  magic "SPK1" | version u16 | num_pixels u16 | cycle_period_ps u64
//!          | tdc_bins_per_clock u16 | clock_period_ps u32 | metadata_count u16
//!          | (key_len u16, key, val_len u16, val)* | cycle_count u64
//! cycle:   cycle_index u64 | record_count u32 | record*
//! record:  pixel u16 | time_ps u64 | flags u8 | [raw_code u32 if flags & 1]
//! ```
//!
//! `cycle_count == u64::MAX` marks a stream of unknown length that is read
//! until a clean end of input at a cycle boundary.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AcquisitionCycle, SensorConfig, Stream, StreamError, StreamHeader, TimestampRecord};

pub const MAGIC: &[u8; 4] = b"SPK1";
pub const FORMAT_VERSION: u16 = 1;
pub const UNKNOWN_CYCLE_COUNT: u64 = u64::MAX;

const FLAG_RAW: u8 = 0x01;
// Cap on speculative allocation; the record count field is untrusted.
const MAX_PREALLOC: usize = 1 << 14;

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Incremental SPK1 encoder.
pub struct StreamWriter<W: Write> {
    out: CountingWriter<W>,
    sensor: SensorConfig,
    declared: Option<u64>,
    written_cycles: u64,
    last_index: Option<u64>,
}

impl<W: Write> StreamWriter<W> {
    /// Writes the header. `cycle_count = None` emits the streaming marker.
    pub fn new(sink: W, header: &StreamHeader, cycle_count: Option<u64>) -> Result<Self, StreamError> {
        header.sensor.validate().map_err(StreamError::InvalidHeader)?;
        if header.version != FORMAT_VERSION {
            return Err(StreamError::UnsupportedVersion(header.version));
        }
        if header.metadata.len() > u16::MAX as usize {
            return Err(StreamError::InvalidHeader("too many metadata entries".into()));
        }
        let mut out = CountingWriter { inner: sink, written: 0 };
        out.write_all(MAGIC)?;
        out.write_u16::<LittleEndian>(header.version)?;
        let s = &header.sensor;
        out.write_u16::<LittleEndian>(s.num_pixels)?;
        out.write_u64::<LittleEndian>(s.cycle_period_ps)?;
        out.write_u16::<LittleEndian>(s.tdc_bins_per_clock)?;
        out.write_u32::<LittleEndian>(s.clock_period_ps)?;
        out.write_u16::<LittleEndian>(header.metadata.len() as u16)?;
        for (k, v) in &header.metadata {
            write_str(&mut out, k)?;
            write_str(&mut out, v)?;
        }
        out.write_u64::<LittleEndian>(cycle_count.unwrap_or(UNKNOWN_CYCLE_COUNT))?;
        Ok(StreamWriter {
            out,
            sensor: header.sensor,
            declared: cycle_count,
            written_cycles: 0,
            last_index: None,
        })
    }

    pub fn write_cycle(&mut self, cycle: &AcquisitionCycle) -> Result<(), StreamError> {
        let ci = self.written_cycles as usize;
        if let Some(p) = self.last_index {
            if cycle.cycle_index <= p {
                return Err(StreamError::Invalid {
                    cycle: ci,
                    record: 0,
                    reason: format!("cycle_index {} not greater than previous {}", cycle.cycle_index, p),
                });
            }
        }
        cycle
            .check(&self.sensor)
            .map_err(|(record, reason)| StreamError::Invalid { cycle: ci, record, reason })?;
        if cycle.records.len() > u32::MAX as usize {
            return Err(StreamError::Invalid { cycle: ci, record: 0, reason: "too many records".into() });
        }
        if let Some(declared) = self.declared {
            if self.written_cycles >= declared {
                return Err(StreamError::CycleCountMismatch { declared, written: self.written_cycles + 1 });
            }
        }
        let out = &mut self.out;
        out.write_u64::<LittleEndian>(cycle.cycle_index)?;
        out.write_u32::<LittleEndian>(cycle.records.len() as u32)?;
        for r in &cycle.records {
            out.write_u16::<LittleEndian>(r.pixel)?;
            out.write_u64::<LittleEndian>(r.time_ps)?;
            match r.raw_code {
                Some(code) => {
                    out.write_u8(FLAG_RAW)?;
                    out.write_u32::<LittleEndian>(code)?;
                }
                None => out.write_u8(0)?,
            }
        }
        self.last_index = Some(cycle.cycle_index);
        self.written_cycles += 1;
        Ok(())
    }

    /// Flushes and returns the total number of bytes emitted.
    pub fn finish(mut self) -> Result<u64, StreamError> {
        if let Some(declared) = self.declared {
            if declared != self.written_cycles {
                return Err(StreamError::CycleCountMismatch { declared, written: self.written_cycles });
            }
        }
        self.out.flush()?;
        Ok(self.out.written)
    }
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<(), StreamError> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(StreamError::InvalidHeader(format!("metadata string of {} bytes too long", bytes.len())));
    }
    out.write_u16::<LittleEndian>(bytes.len() as u16)?;
    out.write_all(bytes)?;
    Ok(())
}

/// Encodes a complete stream and returns the number of bytes written.
pub fn write_stream<W: Write>(header: &StreamHeader, cycles: &[AcquisitionCycle], sink: W) -> Result<u64, StreamError> {
    let mut w = StreamWriter::new(sink, header, Some(cycles.len() as u64))?;
    for c in cycles {
        w.write_cycle(c)?;
    }
    w.finish()
}

/// Decodes a complete stream into memory.
pub fn read_stream<R: Read>(source: R) -> Result<Stream, StreamError> {
    let mut reader = StreamReader::new(source)?;
    let mut cycles = Vec::new();
    for c in &mut reader {
        cycles.push(c?);
    }
    Ok(Stream { header: reader.header, cycles })
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

/// Streaming SPK1 decoder yielding one cycle at a time.
pub struct StreamReader<R: Read> {
    input: CountingReader<R>,
    header: StreamHeader,
    declared: Option<u64>,
    read_cycles: u64,
    last_index: Option<u64>,
    done: bool,
}

fn eof_as<T>(res: io::Result<T>, err: impl FnOnce() -> StreamError) -> Result<T, StreamError> {
    res.map_err(|e| if e.kind() == io::ErrorKind::UnexpectedEof { err() } else { StreamError::Io(e) })
}

impl<R: Read> StreamReader<R> {
    pub fn new(source: R) -> Result<Self, StreamError> {
        let mut input = CountingReader { inner: source, offset: 0 };
        let trunc = || StreamError::TruncatedHeader;
        let mut magic = [0u8; 4];
        match input.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(StreamError::BadMagic),
            Err(e) => return Err(e.into()),
        }
        if &magic != MAGIC {
            return Err(StreamError::BadMagic);
        }
        let version = eof_as(input.read_u16::<LittleEndian>(), trunc)?;
        if version != FORMAT_VERSION {
            return Err(StreamError::UnsupportedVersion(version));
        }
        let sensor = SensorConfig {
            num_pixels: eof_as(input.read_u16::<LittleEndian>(), trunc)?,
            cycle_period_ps: eof_as(input.read_u64::<LittleEndian>(), trunc)?,
            tdc_bins_per_clock: eof_as(input.read_u16::<LittleEndian>(), trunc)?,
            clock_period_ps: eof_as(input.read_u32::<LittleEndian>(), trunc)?,
        };
        sensor.validate().map_err(StreamError::InvalidHeader)?;
        let n_meta = eof_as(input.read_u16::<LittleEndian>(), trunc)?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(&mut input)?;
            let v = read_str(&mut input)?;
            if metadata.insert(k.clone(), v).is_some() {
                return Err(StreamError::InvalidHeader(format!("duplicate metadata key {k:?}")));
            }
        }
        let count = eof_as(input.read_u64::<LittleEndian>(), trunc)?;
        let declared = (count != UNKNOWN_CYCLE_COUNT).then_some(count);
        Ok(StreamReader {
            input,
            header: StreamHeader { version, sensor, metadata },
            declared,
            read_cycles: 0,
            last_index: None,
            done: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    /// Cycle count from the header, `None` for streaming-mode files.
    pub fn declared_cycles(&self) -> Option<u64> {
        self.declared
    }

    fn read_cycle(&mut self) -> Result<Option<AcquisitionCycle>, StreamError> {
        let k = self.read_cycles;
        if let Some(declared) = self.declared {
            if k == declared {
                let mut probe = [0u8; 1];
                return match self.input.read(&mut probe)? {
                    0 => Ok(None),
                    _ => Err(StreamError::CorruptCycle {
                        cycle: k,
                        offset: self.input.offset - 1,
                        reason: format!("trailing data after {declared} declared cycles"),
                    }),
                };
            }
        }
        let start = self.input.offset;
        let mut first = [0u8; 8];
        let mut filled = 0;
        while filled < first.len() {
            let n = self.input.read(&mut first[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 && self.declared.is_none() {
            return Ok(None);
        }
        if filled < first.len() {
            return Err(StreamError::UnexpectedEof { cycle: k });
        }
        let cycle_index = u64::from_le_bytes(first);
        if let Some(p) = self.last_index {
            if cycle_index <= p {
                return Err(StreamError::CorruptCycle {
                    cycle: k,
                    offset: start,
                    reason: format!("cycle_index {cycle_index} not greater than previous {p}"),
                });
            }
        }
        let eof = || StreamError::UnexpectedEof { cycle: k };
        let n_records = eof_as(self.input.read_u32::<LittleEndian>(), eof)?;
        let sensor = self.header.sensor;
        let mut records = Vec::with_capacity((n_records as usize).min(MAX_PREALLOC));
        let mut prev: Option<(u64, u16)> = None;
        for ri in 0..n_records as u64 {
            let offset = self.input.offset;
            let corrupt = |reason: String| StreamError::CorruptRecord { cycle: k, record: ri, offset, reason };
            let pixel = eof_as(self.input.read_u16::<LittleEndian>(), eof)?;
            let time_ps = eof_as(self.input.read_u64::<LittleEndian>(), eof)?;
            let flags = eof_as(self.input.read_u8(), eof)?;
            if flags & !FLAG_RAW != 0 {
                return Err(corrupt(format!("unknown flag bits {flags:#04x}")));
            }
            let raw_code = if flags & FLAG_RAW != 0 {
                Some(eof_as(self.input.read_u32::<LittleEndian>(), eof)?)
            } else {
                None
            };
            if pixel >= sensor.num_pixels {
                return Err(corrupt(format!("pixel {pixel} out of range (num_pixels {})", sensor.num_pixels)));
            }
            if time_ps >= sensor.cycle_period_ps {
                return Err(corrupt(format!("time {time_ps} ps outside cycle of {} ps", sensor.cycle_period_ps)));
            }
            let key = (time_ps, pixel);
            if prev.is_some_and(|p| key < p) {
                return Err(corrupt("records not sorted by (time_ps, pixel)".into()));
            }
            prev = Some(key);
            records.push(TimestampRecord { pixel, time_ps, raw_code });
        }
        self.last_index = Some(cycle_index);
        self.read_cycles += 1;
        Ok(Some(AcquisitionCycle { cycle_index, records }))
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<AcquisitionCycle, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_cycle() {
            Ok(Some(c)) => Some(Ok(c)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_str<R: Read>(input: &mut CountingReader<R>) -> Result<String, StreamError> {
    let trunc = || StreamError::TruncatedHeader;
    let len = eof_as(input.read_u16::<LittleEndian>(), trunc)? as usize;
    let mut buf = vec![0u8; len];
    eof_as(input.read_exact(&mut buf), trunc)?;
    String::from_utf8(buf).map_err(|_| StreamError::InvalidHeader("metadata is not valid UTF-8".into()))
}
