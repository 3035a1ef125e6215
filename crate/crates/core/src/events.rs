//! Event records and streams: parsing, serialization, time slicing, and
//! time reversal for backward-branch conditioning.
//!
//! Two on-disk formats are supported, both bit-exact:
//! - CSV lines `t_us,x,y,p` (extension `.csv`)
//! - packed little-endian binary records of 13 bytes each
//!   (`t`: u64, `x`: u16, `y`: u16, `p`: i8; extension `.evb`)

use crate::{Error, Result};

/// Size of one packed binary event record in bytes.
pub const BINARY_RECORD_LEN: usize = 13;

/// A single polarity event. Timestamps are microseconds, polarity is +-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EventRecord {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Pick a format from a file extension (`csv` or `evb`).
    pub fn from_extension(ext: &str) -> Result<Self> {
        match ext {
            "csv" => Ok(EventFormat::Csv),
            "evb" => Ok(EventFormat::Binary),
            other => Err(Error::Format(format!("unknown event extension `{other}`"))),
        }
    }
}

/// A time-ordered polarity event stream over a fixed sensor size.
///
/// Streams are immutable after construction; every operation returns a new
/// stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Build a stream, validating bounds, polarity, and timestamp ordering.
    pub fn new(width: u16, height: u16, records: Vec<EventRecord>) -> Result<Self> {
        let mut prev_t = 0u64;
        for (i, r) in records.iter().enumerate() {
            if r.x >= width || r.y >= height {
                return Err(Error::Bounds(format!(
                    "record {i}: ({}, {}) outside {width}x{height} sensor",
                    r.x, r.y
                )));
            }
            if r.p != 1 && r.p != -1 {
                return Err(Error::Format(format!("record {i}: polarity {} not +-1", r.p)));
            }
            if i > 0 && r.t < prev_t {
                return Err(Error::Ordering(format!(
                    "record {i}: t={} after t={prev_t}",
                    r.t
                )));
            }
            prev_t = r.t;
        }
        Ok(EventStream {
            width,
            height,
            records,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            records: Vec::new(),
        }
    }

    pub fn sensor_width(&self) -> u16 {
        self.width
    }

    pub fn sensor_height(&self) -> u16 {
        self.height
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sum of signed polarities over the whole stream.
    pub fn signed_polarity_sum(&self) -> i64 {
        self.records.iter().map(|r| r.p as i64).sum()
    }

    /// Records with `t_a < t <= t_b` (half-open, inclusive at the target end),
    /// order preserved.
    pub fn slice(&self, t_a: u64, t_b: u64) -> Result<EventStream> {
        if t_a > t_b {
            return Err(Error::Argument(format!("slice bounds reversed: {t_a} > {t_b}")));
        }
        let start = self.records.partition_point(|r| r.t <= t_a);
        let end = self.records.partition_point(|r| r.t <= t_b);
        Ok(EventStream {
            width: self.width,
            height: self.height,
            records: self.records[start..end].to_vec(),
        })
    }

    /// Map each record `(t, x, y, p)` to `(t_pivot - t, x, y, -p)` and
    /// re-sort to non-decreasing time.
    ///
    /// Polarity inversion keeps the control signal physically consistent
    /// under time reversal (a brightness increase becomes a decrease); it can
    /// be switched off via `invert_polarity`.
    pub fn reverse_time(&self, t_pivot: u64, invert_polarity: bool) -> Result<EventStream> {
        if let Some(last) = self.records.last() {
            if last.t > t_pivot {
                return Err(Error::Argument(format!(
                    "record at t={} beyond pivot {t_pivot}",
                    last.t
                )));
            }
        }
        let records = self
            .records
            .iter()
            .rev()
            .map(|r| EventRecord {
                t: t_pivot - r.t,
                x: r.x,
                y: r.y,
                p: if invert_polarity { -r.p } else { r.p },
            })
            .collect();
        Ok(EventStream {
            width: self.width,
            height: self.height,
            records,
        })
    }
}

/// Parse a byte payload in the given format into a validated stream.
pub fn parse_events(
    bytes: &[u8],
    format: EventFormat,
    sensor_dims: (u16, u16),
) -> Result<EventStream> {
    let (width, height) = sensor_dims;
    let records = match format {
        EventFormat::Csv => parse_csv(bytes)?,
        EventFormat::Binary => parse_binary(bytes)?,
    };
    EventStream::new(width, height, records)
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("csv payload is not utf-8: {e}")))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .ok_or_else(|| Error::Format(format!("line {}: missing {name}", lineno + 1)))
        };
        let t = next("t")?
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("line {}: bad t: {e}", lineno + 1)))?;
        let x = next("x")?
            .trim()
            .parse::<u16>()
            .map_err(|e| Error::Format(format!("line {}: bad x: {e}", lineno + 1)))?;
        let y = next("y")?
            .trim()
            .parse::<u16>()
            .map_err(|e| Error::Format(format!("line {}: bad y: {e}", lineno + 1)))?;
        let p = next("p")?
            .trim()
            .parse::<i8>()
            .map_err(|e| Error::Format(format!("line {}: bad p: {e}", lineno + 1)))?;
        if fields.next().is_some() {
            return Err(Error::Format(format!("line {}: trailing fields", lineno + 1)));
        }
        records.push(EventRecord { t, x, y, p });
    }
    Ok(records)
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    if bytes.len() % BINARY_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "truncated binary payload: {} bytes is not a multiple of {BINARY_RECORD_LEN}",
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(bytes.len() / BINARY_RECORD_LEN);
    for chunk in bytes.chunks_exact(BINARY_RECORD_LEN) {
        let t = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(chunk[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(chunk[10..12].try_into().unwrap());
        let p = chunk[12] as i8;
        records.push(EventRecord { t, x, y, p });
    }
    Ok(records)
}

/// Serialize a stream; `parse_events(serialize_events(s)) == s` bit-exactly.
pub fn serialize_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Csv => {
            let mut out = String::new();
            for r in stream.records() {
                out.push_str(&format!("{},{},{},{}\n", r.t, r.x, r.y, r.p));
            }
            out.into_bytes()
        }
        EventFormat::Binary => {
            let mut out = Vec::with_capacity(stream.len() * BINARY_RECORD_LEN);
            for r in stream.records() {
                out.extend_from_slice(&r.t.to_le_bytes());
                out.extend_from_slice(&r.x.to_le_bytes());
                out.extend_from_slice(&r.y.to_le_bytes());
                out.push(r.p as u8);
            }
            out
        }
    }
}
