//! Binary and CSV trace files.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! header  "XPTR" | u16 version | u16 flags | u64 record_count      (16 B)
//! record  u64 pc | u64 addr | u8 op | u8 core_id | u16 0 | u64 cpu_cycle   (28 B)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CoreId, Op, Trace, TraceError, TraceRecord};

pub const MAGIC: &[u8; 4] = b"XPTR";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_BYTES: usize = 16;
const RECORD_BYTES: usize = 28;

pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> Result<(), TraceError> {
    let mut header = [0u8; HEADER_BYTES];
    header[..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&(trace.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = [0u8; RECORD_BYTES];
    for (core, r) in trace.iter() {
        buf[0..8].copy_from_slice(&r.pc.to_le_bytes());
        buf[8..16].copy_from_slice(&r.addr.to_le_bytes());
        buf[16] = match r.op {
            Op::Read => 0,
            Op::Write => 1,
        };
        buf[17] = core;
        buf[18..20].copy_from_slice(&[0, 0]);
        buf[20..28].copy_from_slice(&r.cpu_cycle.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads until EOF; the stream must contain exactly the declared records.
pub fn read_trace<R: Read>(mut r: R) -> Result<Trace, TraceError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_BYTES {
        return Err(TraceError::MalformedHeader(format!("{} bytes, need {HEADER_BYTES}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(TraceError::MalformedHeader(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(TraceError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[HEADER_BYTES..];
    let complete = (body.len() / RECORD_BYTES) as u64;
    if complete < count {
        return Err(TraceError::Truncated { index: complete });
    }
    let used = count as usize * RECORD_BYTES;
    if body.len() > used {
        return Err(TraceError::TrailingData(body.len() - used));
    }

    let mut records = Vec::with_capacity(count as usize);
    let mut cores: Vec<CoreId> = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(RECORD_BYTES).enumerate() {
        let index = i as u64;
        let op = match rec[16] {
            0 => Op::Read,
            1 => Op::Write,
            value => return Err(TraceError::InvalidOp { index, value }),
        };
        if rec[18] != 0 || rec[19] != 0 {
            return Err(TraceError::ReservedNonZero { index });
        }
        records.push(TraceRecord {
            pc: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
            addr: u64::from_le_bytes(rec[8..16].try_into().unwrap()),
            op,
            cpu_cycle: u64::from_le_bytes(rec[20..28].try_into().unwrap()),
        });
        cores.push(rec[17]);
    }
    Trace::with_cores(records, cores)
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    read_trace(BufReader::new(File::open(path)?))
}

fn parse_u64(field: &str) -> Option<u64> {
    let f = field.trim();
    match f.strip_prefix("0x").or_else(|| f.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => f.parse().ok(),
    }
}

pub fn save_csv(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TraceError::Csv { line: 0, reason: e.to_string() })?;
    let err = |e: csv::Error| TraceError::Csv { line: 0, reason: e.to_string() };
    w.write_record(["pc", "addr", "op", "core_id", "cpu_cycle"]).map_err(err)?;
    for (core, r) in trace.iter() {
        let op = match r.op {
            Op::Read => "R",
            Op::Write => "W",
        };
        w.write_record([
            format!("{:#x}", r.pc),
            format!("{:#x}", r.addr),
            op.to_string(),
            core.to_string(),
            r.cpu_cycle.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Accepts `R`/`W` (or `read`/`write`) for op and hex or decimal numbers.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| TraceError::Csv { line: 1, reason: e.to_string() })?;
    let headers = rdr.headers().map_err(|e| TraceError::Csv { line: 1, reason: e.to_string() })?.clone();
    let expected = ["pc", "addr", "op", "core_id", "cpu_cycle"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(TraceError::Csv { line: 1, reason: format!("header must be {}", expected.join(",")) });
    }
    let mut records = Vec::new();
    let mut cores = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| TraceError::Csv { line, reason: e.to_string() })?;
        let bad = |what: &str| TraceError::Csv { line, reason: format!("bad {what}") };
        let pc = parse_u64(&row[0]).ok_or_else(|| bad("pc"))?;
        let addr = parse_u64(&row[1]).ok_or_else(|| bad("addr"))?;
        let op = match row[2].to_ascii_lowercase().as_str() {
            "r" | "read" | "0" => Op::Read,
            "w" | "write" | "1" => Op::Write,
            _ => return Err(bad("op")),
        };
        let core: CoreId = row[3].parse().map_err(|_| bad("core_id"))?;
        let cpu_cycle = parse_u64(&row[4]).ok_or_else(|| bad("cpu_cycle"))?;
        records.push(TraceRecord { pc, addr, op, cpu_cycle });
        cores.push(core);
    }
    Trace::with_cores(records, cores)
}
