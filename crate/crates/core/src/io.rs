//! CSV ingestion and output formatting.
//!
//! Matrices are headerless comma-separated rows; vectors are one value per
//! line. Parse errors carry the 1-based row number of the offending line.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: name.clone(),
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(rows.len() + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let vals = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: name.clone(),
                    row,
                    msg: format!("column {}: `{field}` is not a finite number", col + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((row, vals));
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: name, row: 0, msg: "file contains no data".into() });
    }
    let width = rows[0].1.len();
    if let Some((row, vals)) = rows.iter().find(|(_, v)| v.len() != width) {
        return Err(Error::Parse {
            path: name,
            row: *row,
            msg: format!("expected {width} fields, found {}", vals.len()),
        });
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

/// Reads a square or rectangular matrix from a headerless CSV file.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let rows = read_rows(path.as_ref())?;
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Reads a square matrix, rejecting non-square input.
pub fn read_square_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let m = read_matrix_csv(&path)?;
    if m.nrows() != m.ncols() {
        return Err(Error::Parse {
            path: path.as_ref().display().to_string(),
            row: 1,
            msg: format!("expected a square matrix, found {} rows of {} fields", m.nrows(), m.ncols()),
        });
    }
    Ok(m)
}

/// Reads a vector stored one value per line.
pub fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    if rows[0].len() != 1 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            row: 1,
            msg: format!("expected one value per line, found {}", rows[0].len()),
        });
    }
    Ok(DVector::from_iterator(rows.len(), rows.into_iter().map(|r| r[0])))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Renders a CSV table with a header row. Values are written verbatim.
pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io { path: path.display().to_string(), source };
    let mut f = File::create(path).map_err(io_err)?;
    f.write_all(render_csv(header, rows).as_bytes()).map_err(io_err)
}
