//! CSV ingestion and JSON/CSV emission.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use sepcor_core::linalg::Matrix;
use sepcor_core::model::cell_index;
use serde::Serialize;

/// Reads a numeric CSV into a matrix. Every row must have the same number of
/// cells and every cell must be a finite number.
pub fn read_matrix(path: &Path, header: bool) -> Result<Matrix> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(header).flexible(true).from_reader(file);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        let width = *cols.get_or_insert(record.len());
        if record.len() != width {
            bail!("{}: line {line} has {} columns, expected {width}", path.display(), record.len());
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                anyhow::anyhow!("{}: line {line}, column {}: '{cell}' is not a number", path.display(), j + 1)
            })?;
            if !value.is_finite() {
                bail!("{}: line {line}, column {}: non-finite value '{cell}'", path.display(), j + 1);
            }
            data.push(value);
        }
        rows += 1;
    }
    let Some(cols) = cols else {
        bail!("{}: no data rows", path.display());
    };
    Ok(Matrix::from_row_major(rows, cols, data)?)
}

/// Reorders columns stored as row-major cells (column l·c + k) into the
/// column-major vec order used internally (column k·r + l).
pub fn row_major_to_vec_order(y: &Matrix, r: usize, c: usize) -> Result<Matrix> {
    if y.cols() != r * c {
        bail!("r*c={} != q={}", r * c, y.cols());
    }
    Ok(Matrix::from_fn(y.rows(), y.cols(), |i, j| {
        let (k, l) = (j / r, j % r);
        debug_assert_eq!(cell_index(l, k, r), j);
        y[(i, l * c + k)]
    }))
}

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Serialize)]
pub struct MatrixJson {
    pub dims: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        MatrixJson { dims: [m.rows(), m.cols()], data: m.as_slice().to_vec() }
    }
}

/// Pretty JSON to `path`, or stdout when no path is given.
pub fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).context("cannot write to stdout"),
    }
}

/// Matrix as CSV without header. `f64`'s `Display` is the shortest string
/// that parses back to the same value.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
