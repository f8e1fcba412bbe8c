//! Matrix dumps as `row,col,re,im` CSV for debugging and cross-implementation
//! regression.

use std::io::{BufRead, Write};

use crate::{CMatrix, Error, Result, C64};

pub const MATRIX_HEADER: &str = "row,col,re,im";

/// Write every entry of `m` in row-major order. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_matrix_csv<W: Write>(m: &CMatrix, mut out: W) -> Result<()> {
    writeln!(out, "{MATRIX_HEADER}")?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let z = m[(r, c)];
            writeln!(out, "{r},{c},{},{}", z.re, z.im)?;
        }
    }
    Ok(())
}

/// Read a dump written by [`write_matrix_csv`]. The shape is inferred from the
/// largest indices; missing entries are an error.
pub fn read_matrix_csv<R: BufRead>(input: R) -> Result<CMatrix> {
    let mut entries = Vec::new();
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == MATRIX_HEADER => {}
        _ => return Err(Error::Format(format!("expected header `{MATRIX_HEADER}`"))),
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("malformed matrix row {}: `{line}`", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let r: usize = f[0].trim().parse().map_err(|_| bad())?;
        let c: usize = f[1].trim().parse().map_err(|_| bad())?;
        let re: f64 = f[2].trim().parse().map_err(|_| bad())?;
        let im: f64 = f[3].trim().parse().map_err(|_| bad())?;
        entries.push((r, c, C64::new(re, im)));
    }
    let rows = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let cols = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if entries.len() != rows * cols {
        return Err(Error::Format(format!(
            "{} entries do not fill a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    let mut m = CMatrix::zeros(rows, cols);
    for (r, c, z) in entries {
        m[(r, c)] = z;
    }
    Ok(m)
}
