//! Raw trajectory records and the line-delimited CSV format.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// One observed position sample. Times sit on a 0.1 s grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub time: f64,
    pub vehicle_id: u64,
    pub x: f64,
    pub y: f64,
}

impl RawRecord {
    /// Time in integer deciseconds; the stable key for grid alignment.
    pub fn time_ds(&self) -> i64 {
        (self.time * 10.0).round() as i64
    }
}

/// Parse `t,id,x,y` CSV. Lines are 1-indexed in error messages; the header
/// is required on non-empty input. Records come back sorted by
/// (vehicle_id, time) and duplicate (id, time) pairs are rejected.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        None => return Ok(records),
        Some((_, line)) => line?,
    };
    if header.trim() != "t,id,x,y" {
        return Err(Error::Data(format!(
            "line 1: expected header 't,id,x,y', got '{}'",
            header.trim()
        )));
    }
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "line {lineno}: expected 4 comma-separated fields, got {}",
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("line {lineno}: bad {what} '{s}'")))
        };
        let time = parse_f(fields[0], "time")?;
        let vehicle_id = fields[1]
            .parse::<u64>()
            .map_err(|_| Error::Data(format!("line {lineno}: bad vehicle id '{}'", fields[1])))?;
        let x = parse_f(fields[2], "x")?;
        let y = parse_f(fields[3], "y")?;
        if time < 0.0 {
            return Err(Error::Data(format!("line {lineno}: negative time {time}")));
        }
        records.push(RawRecord {
            time,
            vehicle_id,
            x,
            y,
        });
    }
    records.sort_by_key(|r| (r.vehicle_id, r.time_ds()));
    for pair in records.windows(2) {
        if pair[0].vehicle_id == pair[1].vehicle_id && pair[0].time_ds() == pair[1].time_ds() {
            return Err(Error::Data(format!(
                "duplicate record for vehicle {} at t={:.1}",
                pair[0].vehicle_id, pair[0].time
            )));
        }
    }
    Ok(records)
}

/// Write records in the canonical format: times with one decimal,
/// coordinates with six.
pub fn write_records<W: Write>(mut w: W, records: &[RawRecord]) -> Result<()> {
    writeln!(w, "t,id,x,y")?;
    for r in records {
        writeln!(w, "{:.1},{},{:.6},{:.6}", r.time, r.vehicle_id, r.x, r.y)?;
    }
    Ok(())
}
