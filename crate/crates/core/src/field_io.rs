//! Field file formats.
//!
//! Binary: `b"PFLD"`, version byte `0x01`, `u32` little-endian `n`, then `n²`
//! little-endian IEEE-754 `f64` values in row-major order.
//!
//! Text: CSV with `n` lines of `n` comma-separated decimal values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhaseField};
use crate::scalar::Scalar;

pub const FIELD_MAGIC: &[u8; 4] = b"PFLD";
pub const FIELD_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldFormat {
    Binary,
    Text,
}

impl FieldFormat {
    /// `.csv`/`.txt` map to text, everything else to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => FieldFormat::Text,
            _ => FieldFormat::Binary,
        }
    }
}

fn parse_err(name: &str, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: name.to_string(),
        location,
        message: message.into(),
    }
}

pub fn encode_binary<T: Scalar>(field: &PhaseField<T>) -> Vec<u8> {
    let n = field.spec().n();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * n);
    out.extend_from_slice(FIELD_MAGIC);
    out.push(FIELD_VERSION);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub(crate) fn read_header(bytes: &[u8], magic: &[u8; 4], name: &str) -> Result<u32> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            name,
            format!("byte {}", bytes.len()),
            format!("truncated header: need {HEADER_LEN} bytes"),
        ));
    }
    if &bytes[..4] != magic {
        return Err(parse_err(
            name,
            "byte 0".into(),
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    if bytes[4] != FIELD_VERSION {
        return Err(parse_err(
            name,
            "byte 4".into(),
            format!("unsupported version {:#04x}", bytes[4]),
        ));
    }
    Ok(u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")))
}

/// Reads `count` little-endian f64 values starting at `offset`.
pub(crate) fn read_f64s(bytes: &[u8], offset: usize, count: usize, name: &str) -> Result<Vec<f64>> {
    let end = offset + 8 * count;
    if bytes.len() < end {
        return Err(parse_err(
            name,
            format!("byte {}", bytes.len()),
            format!(
                "file ends early: expected {count} f64 values ({} bytes) from byte {offset}",
                8 * count
            ),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (idx, chunk) in bytes[offset..end].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_err(
                name,
                format!("byte {}", offset + 8 * idx),
                format!("non-finite value {v}"),
            ));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn decode_binary<T: Scalar>(bytes: &[u8], dx: f64, name: &str) -> Result<PhaseField<T>> {
    let n = read_header(bytes, FIELD_MAGIC, name)? as usize;
    let spec = GridSpec::new(n, dx)?;
    let values = read_f64s(bytes, HEADER_LEN, n * n, name)?;
    if bytes.len() != HEADER_LEN + 8 * n * n {
        return Err(parse_err(
            name,
            format!("byte {}", HEADER_LEN + 8 * n * n),
            format!("{} trailing bytes after field data", bytes.len() - HEADER_LEN - 8 * n * n),
        ));
    }
    PhaseField::new(spec, values.into_iter().map(T::of).collect())
}

pub fn encode_text<T: Scalar>(field: &PhaseField<T>) -> String {
    let n = field.spec().n();
    let mut out = String::with_capacity(n * n * 24);
    for row in field.values().chunks(n) {
        let line: Vec<String> = row.iter().map(|v| format!("{:?}", v.as_f64())).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_text<T: Scalar>(text: &str, dx: f64, name: &str) -> Result<PhaseField<T>> {
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let n = rows.len();
    if n == 0 {
        return Err(parse_err(name, "line 1".into(), "empty field file"));
    }
    let mut values = Vec::with_capacity(n * n);
    for (line_no, line) in rows {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != n {
            return Err(parse_err(
                name,
                format!("line {}", line_no + 1),
                format!("expected {n} values (square grid with {n} rows), found {}", cols.len()),
            ));
        }
        for (c, tok) in cols.iter().enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                parse_err(
                    name,
                    format!("line {}, column {}", line_no + 1, c + 1),
                    format!("cannot parse '{}' as a number", tok.trim()),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    name,
                    format!("line {}, column {}", line_no + 1, c + 1),
                    format!("non-finite value {v}"),
                ));
            }
            values.push(T::of(v));
        }
    }
    PhaseField::new(GridSpec::new(n, dx)?, values)
}

/// Reads a field, detecting the binary format by its magic bytes.
pub fn read_field<T: Scalar>(path: impl AsRef<Path>, dx: f64) -> Result<PhaseField<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(FIELD_MAGIC) {
        decode_binary(&bytes, dx, &name)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| parse_err(&name, format!("byte {}", e.valid_up_to()), "invalid UTF-8"))?;
        parse_text(text, dx, &name)
    }
}

pub fn write_field<T: Scalar>(
    field: &PhaseField<T>,
    path: impl AsRef<Path>,
    format: FieldFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        FieldFormat::Binary => encode_binary(field),
        FieldFormat::Text => encode_text(field).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
