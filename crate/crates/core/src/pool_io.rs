//! Binary pool file format.
//!
//! All integers and floats are little-endian. Layout:
//!
//! | field            | type            | notes                                   |
//! |------------------|-----------------|-----------------------------------------|
//! | magic            | `[u8; 4]`       | `b"MSAL"`                               |
//! | version          | `u16`           | `1`                                     |
//! | flags            | `u16`           | bit 0: entropy column present           |
//! | n_patches        | `u64`           |                                         |
//! | n_classes        | `u16`           | `>= 2`                                  |
//! | patch_capacity   | `u32`           | pixels per patch                        |
//!
//! The 22-byte header is followed by `n_patches` records:
//!
//! | field            | type            | notes                                   |
//! |------------------|-----------------|-----------------------------------------|
//! | patch_id         | `u64`           | strictly increasing                     |
//! | bald_max         | `f32`           |                                         |
//! | bald_min         | `f32`           |                                         |
//! | bald_mean        | `f32`           | `min <= mean <= max`                    |
//! | entropy_mean     | `f32`           | only when flag bit 0 is set             |
//! | presence         | `[u8; ceil(C/8)]` | LSB-first bitset, padding bits zero   |
//! | gt_pixel_counts  | `[u32; C]`      | sum `<= patch_capacity`                 |
//!
//! The file ends with an 8-byte checksum: the sum of every preceding byte,
//! modulo 2^64.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

use crate::features::{BaldSummary, ClassPresence, ProbMap};
use crate::pool::PatchRecord;

pub const MAGIC: [u8; 4] = *b"MSAL";
pub const VERSION: u16 = 1;
pub const FLAG_ENTROPY: u16 = 1;
pub const HEADER_LEN: usize = 22;
pub const CHECKSUM_LEN: usize = 8;

pub const PROBMAP_MAGIC: [u8; 4] = *b"MSPM";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown flag bits {0:#06x}")]
    UnknownFlags(u16),
    #[error("bad header: {0}")]
    Header(String),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("record {id}: {reason}")]
    Invariant { id: u64, reason: String },
    #[error("file truncated")]
    Truncated,
    #[error("unexpected bytes after checksum")]
    TrailingBytes,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolHeader {
    pub flags: u16,
    pub n_patches: u64,
    pub n_classes: u16,
    pub patch_capacity: u32,
}

impl PoolHeader {
    pub fn new(n_patches: u64, n_classes: u16, patch_capacity: u32, with_entropy: bool) -> Self {
        Self {
            flags: if with_entropy { FLAG_ENTROPY } else { 0 },
            n_patches,
            n_classes,
            patch_capacity,
        }
    }

    pub fn has_entropy(&self) -> bool {
        self.flags & FLAG_ENTROPY != 0
    }

    pub fn presence_bytes(&self) -> usize {
        (self.n_classes as usize).div_ceil(8)
    }

    /// Encoded size of one record.
    pub fn record_len(&self) -> usize {
        let floats = if self.has_entropy() { 4 } else { 3 };
        8 + 4 * floats + self.presence_bytes() + 4 * self.n_classes as usize
    }

    /// Total encoded file size.
    pub fn file_len(&self) -> u64 {
        (HEADER_LEN + CHECKSUM_LEN) as u64 + self.n_patches * self.record_len() as u64
    }

    fn validate(&self) -> Result<(), FormatError> {
        if self.flags & !FLAG_ENTROPY != 0 {
            return Err(FormatError::UnknownFlags(self.flags));
        }
        if self.n_classes < 2 {
            return Err(FormatError::Header(format!(
                "n_classes = {} (need >= 2)",
                self.n_classes
            )));
        }
        Ok(())
    }
}

struct SumWriter<W> {
    inner: W,
    sum: u64,
}

impl<W: Write> Write for SumWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.sum = buf[..n]
            .iter()
            .fold(self.sum, |s, &b| s.wrapping_add(b as u64));
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct SumReader<R> {
    inner: R,
    sum: u64,
}

impl<R: Read> Read for SumReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.sum = buf[..n]
            .iter()
            .fold(self.sum, |s, &b| s.wrapping_add(b as u64));
        Ok(n)
    }
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> io::Result<f32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Checks one record against the header; `prev_id` is the id of the record before it.
pub fn check_record(
    header: &PoolHeader,
    record: &PatchRecord,
    prev_id: Option<u64>,
) -> Result<(), FormatError> {
    let bad = |reason: String| FormatError::Invariant {
        id: record.id,
        reason,
    };
    if let Some(prev) = prev_id {
        if record.id <= prev {
            return Err(bad(format!("id not greater than previous id {prev}")));
        }
    }
    let b = &record.bald;
    let finite = [b.max, b.min, b.mean].iter().all(|v| v.is_finite());
    if !finite || !(b.min <= b.mean && b.mean <= b.max) {
        return Err(bad(format!(
            "bald features out of order (max {}, min {}, mean {})",
            b.max, b.min, b.mean
        )));
    }
    match (header.has_entropy(), record.entropy_mean) {
        (true, None) => return Err(bad("entropy column missing".into())),
        (false, Some(_)) => return Err(bad("entropy value without entropy flag".into())),
        (true, Some(e)) if !e.is_finite() => return Err(bad("non-finite entropy".into())),
        _ => {}
    }
    let c = header.n_classes as usize;
    if record.presence.len() != c || record.gt_pixel_counts.len() != c {
        return Err(bad(format!("expected {c} classes")));
    }
    let total: u64 = record.gt_pixel_counts.iter().map(|&n| n as u64).sum();
    if total > header.patch_capacity as u64 {
        return Err(bad(format!(
            "{total} ground-truth pixels exceed capacity {}",
            header.patch_capacity
        )));
    }
    Ok(())
}

/// Writes a pool file. Every record is validated before the first byte is written.
pub fn write_pool<W: Write>(
    header: &PoolHeader,
    records: &[PatchRecord],
    sink: W,
) -> Result<(), FormatError> {
    header.validate()?;
    if header.n_patches != records.len() as u64 {
        return Err(FormatError::Header(format!(
            "header declares {} patches but {} records were given",
            header.n_patches,
            records.len()
        )));
    }
    let mut prev = None;
    for r in records {
        check_record(header, r, prev)?;
        prev = Some(r.id);
    }

    let mut w = SumWriter {
        inner: sink,
        sum: 0,
    };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header.flags.to_le_bytes())?;
    w.write_all(&header.n_patches.to_le_bytes())?;
    w.write_all(&header.n_classes.to_le_bytes())?;
    w.write_all(&header.patch_capacity.to_le_bytes())?;

    let mut buf = Vec::with_capacity(header.record_len());
    for r in records {
        buf.clear();
        encode_record(header, r, &mut buf);
        w.write_all(&buf)?;
    }
    let sum = w.sum;
    let mut inner = w.inner;
    inner.write_all(&sum.to_le_bytes())?;
    inner.flush()?;
    Ok(())
}

fn encode_record(header: &PoolHeader, r: &PatchRecord, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&r.id.to_le_bytes());
    for v in [r.bald.max, r.bald.min, r.bald.mean] {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(e) = r.entropy_mean {
        buf.extend_from_slice(&(e as f32).to_le_bytes());
    }
    let mut bits = vec![0u8; header.presence_bytes()];
    for (i, &b) in r.presence.bits().iter().enumerate() {
        if b {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bits);
    for &n in &r.gt_pixel_counts {
        buf.extend_from_slice(&n.to_le_bytes());
    }
}

/// Streaming pool reader. Records are decoded one at a time; the checksum is
/// verified after the last record, so a consumer must drain the iterator to
/// know the file is intact.
pub struct PoolReader<R: Read> {
    src: SumReader<R>,
    header: PoolHeader,
    remaining: u64,
    prev_id: Option<u64>,
    done: bool,
    scratch: Vec<u8>,
}

impl<R: Read> PoolReader<R> {
    pub fn new(source: R) -> Result<Self, FormatError> {
        let mut src = SumReader {
            inner: source,
            sum: 0,
        };
        let mut magic = [0u8; 4];
        src.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = read_u16(&mut src)?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let header = PoolHeader {
            flags: read_u16(&mut src)?,
            n_patches: read_u64(&mut src)?,
            n_classes: read_u16(&mut src)?,
            patch_capacity: read_u32(&mut src)?,
        };
        header.validate()?;
        Ok(Self {
            src,
            remaining: header.n_patches,
            scratch: vec![0; header.record_len()],
            header,
            prev_id: None,
            done: false,
        })
    }

    pub fn header(&self) -> &PoolHeader {
        &self.header
    }

    fn next_record(&mut self) -> Result<PatchRecord, FormatError> {
        self.src.read_exact(&mut self.scratch)?;
        let h = self.header;
        let mut cur = &self.scratch[..];
        let id = read_u64(&mut cur)?;
        let max = read_f32(&mut cur)? as f64;
        let min = read_f32(&mut cur)? as f64;
        let mean = read_f32(&mut cur)? as f64;
        let entropy_mean = if h.has_entropy() {
            Some(read_f32(&mut cur)? as f64)
        } else {
            None
        };
        let c = h.n_classes as usize;
        let (bits, mut cur) = cur.split_at(h.presence_bytes());
        if !c.is_multiple_of(8) && bits[c / 8] >> (c % 8) != 0 {
            return Err(FormatError::Invariant {
                id,
                reason: "presence padding bits set".into(),
            });
        }
        let presence = (0..c).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let gt_pixel_counts = (0..c)
            .map(|_| read_u32(&mut cur))
            .collect::<io::Result<Vec<_>>>()?;
        let record = PatchRecord {
            id,
            bald: BaldSummary { max, min, mean },
            entropy_mean,
            presence: ClassPresence::new(presence),
            gt_pixel_counts,
        };
        check_record(&h, &record, self.prev_id)?;
        self.prev_id = Some(id);
        Ok(record)
    }

    fn finish(&mut self) -> Result<(), FormatError> {
        let computed = self.src.sum;
        let stored = read_u64(&mut self.src.inner)?;
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let mut probe = [0u8; 1];
        loop {
            match self.src.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(FormatError::TrailingBytes),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<R: Read> Iterator for PoolReader<R> {
    type Item = Result<PatchRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            return match self.finish() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        self.remaining -= 1;
        let r = self.next_record();
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

/// Reads and fully validates a pool file.
pub fn read_pool<R: Read>(source: R) -> Result<(PoolHeader, Vec<PatchRecord>), FormatError> {
    let reader = PoolReader::new(source)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

/// Formats a float with 6 significant digits in plain notation.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn csv_header(header: &PoolHeader) -> Vec<String> {
    let mut cols: Vec<String> = ["id", "bald_max", "bald_min", "bald_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.has_entropy() {
        cols.push("entropy_mean".into());
    }
    let c = header.n_classes as usize;
    cols.extend((0..c).map(|i| format!("p{i}")));
    cols.extend((0..c).map(|i| format!("g{i}")));
    cols
}

/// Debug export: one row per record.
pub fn export_csv<W: Write>(
    header: &PoolHeader,
    records: &[PatchRecord],
    sink: W,
) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(sink);
    let to_io = |e: csv::Error| FormatError::Io(io::Error::other(e));
    w.write_record(csv_header(header)).map_err(to_io)?;
    for r in records {
        let mut row = vec![
            r.id.to_string(),
            fmt_sig6(r.bald.max),
            fmt_sig6(r.bald.min),
            fmt_sig6(r.bald.mean),
        ];
        if let Some(e) = r.entropy_mean {
            row.push(fmt_sig6(e));
        }
        row.extend(r.presence.bits().iter().map(|&b| (b as u8).to_string()));
        row.extend(r.gt_pixel_counts.iter().map(|n| n.to_string()));
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a CSV produced by [`export_csv`]. Float columns lose precision
/// beyond six significant digits.
pub fn import_csv<R: Read>(
    source: R,
    patch_capacity: u32,
) -> Result<(PoolHeader, Vec<PatchRecord>), FormatError> {
    let to_err = |e: csv::Error| FormatError::Header(e.to_string());
    let mut rdr = csv::Reader::from_reader(source);
    let cols = rdr.headers().map_err(to_err)?.clone();
    let has_entropy = cols.iter().any(|c| c == "entropy_mean");
    let n_classes = cols.iter().filter(|c| c.starts_with('p')).count();
    let fixed = 4 + has_entropy as usize;
    if cols.len() != fixed + 2 * n_classes {
        return Err(FormatError::Header(format!(
            "unexpected column count {}",
            cols.len()
        )));
    }
    let parse_f = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| FormatError::Header(format!("bad float {s:?}: {e}")))
    };
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(to_err)?;
        let id = row[0]
            .parse::<u64>()
            .map_err(|e| FormatError::Header(format!("bad id: {e}")))?;
        let bald = BaldSummary {
            max: parse_f(&row[1])?,
            min: parse_f(&row[2])?,
            mean: parse_f(&row[3])?,
        };
        let entropy_mean = if has_entropy {
            Some(parse_f(&row[4])?)
        } else {
            None
        };
        let presence = (0..n_classes).map(|i| &row[fixed + i] == "1").collect();
        let gt_pixel_counts = (0..n_classes)
            .map(|i| {
                row[fixed + n_classes + i]
                    .parse::<u32>()
                    .map_err(|e| FormatError::Header(format!("bad count: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.push(PatchRecord {
            id,
            bald,
            entropy_mean,
            presence: ClassPresence::new(presence),
            gt_pixel_counts,
        });
    }
    let header = PoolHeader::new(
        records.len() as u64,
        n_classes as u16,
        patch_capacity,
        has_entropy,
    );
    Ok((header, records))
}

/// One probability volume of the cross-implementation fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMapVolume {
    pub id: u64,
    pub map: ProbMap,
}

/// Writes a probability-volume fixture: magic `MSPM`, version `u16`,
/// count `u32`, then per volume `id u64, T u32, K u32, C u16` and `T*K*C`
/// `f32` values in `[t][k][c]` order, closed by the same additive checksum
/// as pool files.
pub fn write_probmaps<W: Write>(volumes: &[ProbMapVolume], sink: W) -> Result<(), FormatError> {
    let mut w = SumWriter {
        inner: sink,
        sum: 0,
    };
    w.write_all(&PROBMAP_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(volumes.len() as u32).to_le_bytes())?;
    for v in volumes {
        w.write_all(&v.id.to_le_bytes())?;
        w.write_all(&(v.map.passes() as u32).to_le_bytes())?;
        w.write_all(&(v.map.pixels() as u32).to_le_bytes())?;
        w.write_all(&(v.map.classes() as u16).to_le_bytes())?;
        for &p in v.map.as_slice() {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
    }
    let sum = w.sum;
    let mut inner = w.inner;
    inner.write_all(&sum.to_le_bytes())?;
    inner.flush()?;
    Ok(())
}

/// Reads a probability-volume fixture written by [`write_probmaps`] or the
/// extraction sidecar.
pub fn read_probmaps<R: BufRead>(source: R) -> Result<Vec<ProbMapVolume>, FormatError> {
    let mut src = SumReader {
        inner: source,
        sum: 0,
    };
    let mut magic = [0u8; 4];
    src.read_exact(&mut magic)?;
    if magic != PROBMAP_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = read_u16(&mut src)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut src)?;
    let mut volumes = Vec::new();
    for _ in 0..count {
        let id = read_u64(&mut src)?;
        let t = read_u32(&mut src)? as usize;
        let k = read_u32(&mut src)? as usize;
        let c = read_u16(&mut src)? as usize;
        let n = t
            .checked_mul(k)
            .and_then(|v| v.checked_mul(c))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| FormatError::Header(format!("volume {id} too large")))?;
        let data = (0..n)
            .map(|_| read_f32(&mut src).map(|v| v as f64))
            .collect::<io::Result<Vec<_>>>()?;
        // f32 storage rounds the distributions, so renormalize before validation.
        let mut data = data;
        for row in data.chunks_exact_mut(c.max(1)) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let map = ProbMap::new(t, k, c, data).map_err(|e| FormatError::Invariant {
            id,
            reason: e.to_string(),
        })?;
        volumes.push(ProbMapVolume { id, map });
    }
    let computed = src.sum;
    let stored = read_u64(&mut src.inner)?;
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, c: usize) -> PatchRecord {
        PatchRecord {
            id,
            bald: BaldSummary {
                max: 0.5,
                min: 0.125,
                mean: 0.25,
            },
            entropy_mean: None,
            presence: ClassPresence::new((0..c).map(|i| i % 2 == 0).collect()),
            gt_pixel_counts: (0..c as u32).collect(),
        }
    }

    fn encode(header: &PoolHeader, records: &[PatchRecord]) -> Vec<u8> {
        let mut out = Vec::new();
        write_pool(header, records, &mut out).unwrap();
        out
    }

    #[test]
    fn empty_pool_size() {
        let h = PoolHeader::new(0, 4, 4096, false);
        let bytes = encode(&h, &[]);
        assert_eq!(bytes.len(), 22 + 8);
        assert_eq!(h.file_len(), 30);
        let (rh, recs) = read_pool(&bytes[..]).unwrap();
        assert_eq!(rh, h);
        assert!(recs.is_empty());
    }

    #[test]
    fn record_layout_is_exact() {
        let h = PoolHeader::new(1, 10, 4096, false);
        let bytes = encode(&h, &[record(7, 10)]);
        assert_eq!(bytes.len() as u64, h.file_len());
        assert_eq!(&bytes[..4], b"MSAL");
        assert_eq!(&bytes[4..6], &[1, 0]);
        let rec = &bytes[HEADER_LEN..];
        assert_eq!(&rec[..8], &7u64.to_le_bytes());
        assert_eq!(&rec[8..12], &0.5f32.to_le_bytes());
        // classes 0,2,4,6,8 present: LSB-first -> 0b0101_0101, then bit 0 of byte 2
        assert_eq!(&rec[20..22], &[0b0101_0101, 0b0000_0001]);
        assert_eq!(&rec[22..26], &0u32.to_le_bytes());
        assert_eq!(&rec[26..30], &1u32.to_le_bytes());
        let sum: u64 = bytes[..bytes.len() - 8].iter().map(|&b| b as u64).sum();
        assert_eq!(&bytes[bytes.len() - 8..], &sum.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let h = PoolHeader::new(3, 9, 100, true);
        let mut recs: Vec<_> = [2, 5, 9].iter().map(|&i| record(i, 9)).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.entropy_mean = Some(0.5 * i as f64);
        }
        let bytes = encode(&h, &recs);
        let (rh, back) = read_pool(&bytes[..]).unwrap();
        assert_eq!(rh, h);
        assert_eq!(back, recs);
    }

    #[test]
    fn single_byte_flip_is_caught() {
        let h = PoolHeader::new(2, 4, 100, false);
        let mut bytes = encode(&h, &[record(1, 4), record(2, 4)]);
        bytes[HEADER_LEN + 3] ^= 0x10;
        assert!(read_pool(&bytes[..]).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let h = PoolHeader::new(0, 4, 100, false);
        let mut bytes = encode(&h, &[]);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_pool(&bytes[..]), Err(FormatError::BadMagic(m)) if &m == b"XXXX"));
        let mut bytes = encode(&h, &[]);
        bytes[4] = 2;
        assert!(matches!(
            read_pool(&bytes[..]),
            Err(FormatError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn invariant_violation_names_record() {
        let h = PoolHeader::new(1, 4, 100, false);
        let mut r = record(7, 4);
        r.bald.min = 0.9;
        let mut out = Vec::new();
        match write_pool(&h, &[r.clone()], &mut out) {
            Err(FormatError::Invariant { id, .. }) => assert_eq!(id, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(
            out.is_empty(),
            "nothing may be written on invariant failure"
        );

        // hand-craft the same record on disk, with a valid checksum
        let mut bytes = encode(&h, &[record(7, 4)]);
        let off = HEADER_LEN + 12;
        bytes[off..off + 4].copy_from_slice(&0.9f32.to_le_bytes());
        let n = bytes.len() - 8;
        let sum: u64 = bytes[..n].iter().map(|&b| b as u64).sum();
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        match read_pool(&bytes[..]) {
            Err(FormatError::Invariant { id, .. }) => assert_eq!(id, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn capacity_and_order_enforced() {
        let h = PoolHeader::new(2, 4, 5, false);
        let mut out = Vec::new();
        assert!(write_pool(&h, &[record(1, 4), record(2, 4)], &mut out).is_err());
        let h = PoolHeader::new(2, 4, 100, false);
        assert!(write_pool(&h, &[record(2, 4), record(2, 4)], &mut out).is_err());
        assert!(write_pool(&h, &[record(1, 4)], &mut out).is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let h = PoolHeader::new(1, 4, 100, false);
        let bytes = encode(&h, &[record(1, 4)]);
        assert!(matches!(
            read_pool(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated)
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            read_pool(&longer[..]),
            Err(FormatError::TrailingBytes)
        ));
    }

    #[test]
    fn csv_export_shape_and_reimport() {
        let h = PoolHeader::new(1, 2, 100, false);
        let mut r = record(3, 2);
        r.bald = BaldSummary {
            max: 0.123456789,
            min: 0.01,
            mean: 0.05,
        };
        let mut out = Vec::new();
        export_csv(&h, &[r.clone()], &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "id,bald_max,bald_min,bald_mean,p0,p1,g0,g1");
        assert_eq!(lines[0].split(',').count(), 4 + 2 * 2);
        assert!(lines[1].starts_with("3,0.123457,"));
        let (ih, back) = import_csv(&out[..], 100).unwrap();
        assert_eq!(ih, h);
        assert_eq!(back[0].presence, r.presence);
        assert_eq!(back[0].gt_pixel_counts, r.gt_pixel_counts);
        assert!((back[0].bald.max - r.bald.max).abs() < 1e-5);
    }

    #[test]
    fn csv_with_entropy_column() {
        let h = PoolHeader::new(1, 3, 100, true);
        let mut r = record(1, 3);
        r.entropy_mean = Some(1.5);
        let mut out = Vec::new();
        export_csv(&h, &[r], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text.lines().next().unwrap().split(',').count(),
            4 + 1 + 2 * 3
        );
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(0.693147180), "0.693147");
        assert_eq!(fmt_sig6(123.4567891), "123.457");
        assert_eq!(fmt_sig6(-0.000123456789), "-0.000123457");
    }

    #[test]
    fn probmap_fixture_round_trip() {
        let map = ProbMap::new(2, 1, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let vols = vec![ProbMapVolume { id: 4, map }];
        let mut out = Vec::new();
        write_probmaps(&vols, &mut out).unwrap();
        assert_eq!(read_probmaps(&out[..]).unwrap(), vols);
        out[10] ^= 1;
        assert!(read_probmaps(&out[..]).is_err());
    }
}
