//! Dataset files (CSV and a compact binary format) and JSON helpers.
//!
//! Binary layout: 16-byte header `b"GLMM"`, `u32 n`, `u32 d`, four zero
//! bytes; then `n` rows of `d + 1` little-endian `f64` (`x_1..x_d, y`).

use crate::error::{Error, Result};
use crate::moments::Dataset;
use crate::tensor::Matrix;
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GLMM";
const HEADER_LEN: usize = 16;

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(
            "matrix rows have unequal lengths".into(),
        ));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Json(format!("{}: {e}", path.display())))
}

pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = data.d();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    let mut record = Vec::with_capacity(d + 1);
    for i in 0..data.n() {
        record.clear();
        record.extend(data.row(i).iter().map(|v| v.to_string()));
        record.push(data.y()[i].to_string());
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(data: &Dataset, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_csv(data, BufWriter::new(f))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reads a CSV whose header is `x_1, …, x_d, y`. Parse errors carry the
/// 1-based line number.
pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let cols = header.len();
    if cols < 2 || header.get(cols - 1).map(str::trim) != Some("y") {
        return Err(Error::Parse {
            line: 1,
            message: "header must be x_1,...,x_d,y".into(),
        });
    }
    let d = cols - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != cols {
            return Err(Error::Parse {
                line,
                message: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {} is not a number: '{field}'", c + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {} is not finite", c + 1),
                });
            }
            if c < d {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Dataset::new(d, x, y)
}

pub fn read_csv_file(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(f))
}

pub fn write_binary<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let n = u32::try_from(data.n()).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let d =
        u32::try_from(data.d()).map_err(|_| Error::InvalidArgument("too many columns".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&d.to_le_bytes())?;
    out.write_all(&[0u8; 4])?;
    for i in 0..data.n() {
        for v in data.row(i) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&data.y()[i].to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: "missing GLMM header".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + n * (d + 1) * 8;
    if bytes.len() != expected {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "expected {expected} bytes for n={n}, d={d}, found {}",
                bytes.len()
            ),
        });
    }
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if k % (d + 1) == d {
            y.push(v);
        } else {
            x.push(v);
        }
    }
    Dataset::new(d, x, y)
}

/// Reads a dataset, choosing the format from the file contents.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(MAGIC) {
        read_binary(&bytes)
    } else {
        read_csv(bytes.as_slice())
    }
}
