//! Parity-check matrix file ingestion: MacKay alist and dense 0/1 rows.
//!
//! Both parsers are total over arbitrary byte input: any malformed file is a
//! `Data` error, never a panic or an unbounded allocation.

use crate::error::{Error, Result};
use crate::gf2::BinaryMatrix;

/// Parser guard against absurd declared dimensions (files are untrusted).
const MAX_DIM: usize = 16_384;
const MAX_CELLS: usize = 1 << 22;

/// Supported matrix file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Alist,
    Dense01,
}

impl MatrixFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "alist" => Ok(MatrixFormat::Alist),
            "dense01" => Ok(MatrixFormat::Dense01),
            other => Err(Error::config(format!(
                "unknown matrix format '{}': expected alist or dense01",
                other
            ))),
        }
    }
}

/// Parse matrix file content in the given format.
pub fn load_parity_check(source: &str, format: MatrixFormat) -> Result<BinaryMatrix> {
    match format {
        MatrixFormat::Alist => parse_alist(source),
        MatrixFormat::Dense01 => parse_dense01(source),
    }
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::data(format!("{}: not a non-negative integer: '{}'", what, tok)))
}

/// Parse a MacKay-convention alist file.
///
/// Layout: line 1 "n m", line 2 "max_col_w max_row_w", a line of n column
/// weights, a line of m row weights, then n column position lists and m row
/// position lists (1-indexed, optionally 0-padded to the max weight).
pub fn parse_alist(source: &str) -> Result<BinaryMatrix> {
    let mut lines = source
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty());
    let mut next_line = |what: &str| -> Result<Vec<&str>> {
        lines
            .next()
            .map(|l| l.split_whitespace().collect())
            .ok_or_else(|| Error::data(format!("alist: missing {}", what)))
    };

    let header = next_line("header line")?;
    if header.len() != 2 {
        return Err(Error::data("alist: header must be 'n m'"));
    }
    let n = parse_usize(header[0], "alist n")?;
    let m = parse_usize(header[1], "alist m")?;
    if n == 0 || m == 0 {
        return Err(Error::data("alist: dimensions must be positive"));
    }
    if n > MAX_DIM || m > MAX_DIM || n.saturating_mul(m) > MAX_CELLS {
        return Err(Error::data(format!("alist: dimensions {}x{} too large", m, n)));
    }

    let maxw = next_line("max-weight line")?;
    if maxw.len() != 2 {
        return Err(Error::data("alist: second line must be 'max_col_w max_row_w'"));
    }
    let max_col_w = parse_usize(maxw[0], "alist max column weight")?;
    let max_row_w = parse_usize(maxw[1], "alist max row weight")?;
    if max_col_w > m || max_row_w > n {
        return Err(Error::data("alist: maximum weights exceed matrix dimensions"));
    }

    let col_w_toks = next_line("column weight line")?;
    if col_w_toks.len() != n {
        return Err(Error::data(format!(
            "alist: expected {} column weights, found {}",
            n,
            col_w_toks.len()
        )));
    }
    let mut col_w = Vec::with_capacity(n);
    for t in col_w_toks {
        let w = parse_usize(t, "alist column weight")?;
        if w > max_col_w {
            return Err(Error::data("alist: column weight exceeds declared maximum"));
        }
        col_w.push(w);
    }

    let row_w_toks = next_line("row weight line")?;
    if row_w_toks.len() != m {
        return Err(Error::data(format!(
            "alist: expected {} row weights, found {}",
            m,
            row_w_toks.len()
        )));
    }
    let mut row_w = Vec::with_capacity(m);
    for t in row_w_toks {
        let w = parse_usize(t, "alist row weight")?;
        if w > max_row_w {
            return Err(Error::data("alist: row weight exceeds declared maximum"));
        }
        row_w.push(w);
    }
    if col_w.iter().sum::<usize>() != row_w.iter().sum::<usize>() {
        return Err(Error::data(
            "alist: column weight total differs from row weight total",
        ));
    }

    // position lists may carry exactly w entries or be 0-padded to the maximum;
    // a zero max weight means the writer emitted nothing but blank lines
    let mut parse_positions = |weight: usize, max_w: usize, limit: usize, what: &str| -> Result<Vec<usize>> {
        if max_w == 0 {
            return Ok(Vec::new());
        }
        let toks = next_line(what)?;
        if toks.len() != weight && toks.len() != max_w {
            return Err(Error::data(format!(
                "{}: expected {} (or 0-padded {}) entries, found {}",
                what,
                weight,
                max_w,
                toks.len()
            )));
        }
        let mut pos = Vec::with_capacity(weight);
        for (i, t) in toks.iter().enumerate() {
            let p = parse_usize(t, what)?;
            if i < weight {
                if p == 0 || p > limit {
                    return Err(Error::data(format!("{}: position {} out of range 1..={}", what, p, limit)));
                }
                pos.push(p - 1);
            } else if p != 0 {
                return Err(Error::data(format!("{}: padding entries must be 0", what)));
            }
        }
        Ok(pos)
    };

    let mut mat = BinaryMatrix::zeros(m, n);
    for (j, &w) in col_w.iter().enumerate() {
        let rows = parse_positions(w, max_col_w, m, "alist column list")?;
        let mut seen = vec![false; m];
        for r in rows {
            if seen[r] {
                return Err(Error::data("alist: duplicate position in column list"));
            }
            seen[r] = true;
            mat.set(r, j, 1);
        }
    }
    // row lists must agree with the matrix assembled from the column lists
    for (i, &w) in row_w.iter().enumerate() {
        let cols = parse_positions(w, max_row_w, n, "alist row list")?;
        let mut expect = vec![false; n];
        for c in cols {
            if expect[c] {
                return Err(Error::data("alist: duplicate position in row list"));
            }
            expect[c] = true;
        }
        for c in 0..n {
            if (mat.get(i, c) == 1) != expect[c] {
                return Err(Error::data(format!(
                    "alist: row list {} disagrees with column lists",
                    i
                )));
            }
        }
    }
    Ok(mat)
}

/// Parse whitespace-separated dense 0/1 rows.
pub fn parse_dense01(source: &str) -> Result<BinaryMatrix> {
    let rows: Vec<Vec<u8>> = source
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|t| match t {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(Error::data(format!("dense01: expected 0 or 1, found '{}'", other))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::data("dense01: empty input"));
    }
    if rows.len() > MAX_DIM || rows[0].len() > MAX_DIM {
        return Err(Error::data("dense01: dimensions too large"));
    }
    let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
    BinaryMatrix::from_rows(&refs)
}

/// Serialize to the alist format (0-padded position lists).
pub fn write_alist(m: &BinaryMatrix) -> String {
    let (rows, cols) = (m.rows(), m.cols());
    let col_w: Vec<usize> = (0..cols)
        .map(|j| (0..rows).filter(|&i| m.get(i, j) == 1).count())
        .collect();
    let row_w: Vec<usize> = (0..rows)
        .map(|i| m.row(i).iter().map(|&b| b as usize).sum())
        .collect();
    let max_col_w = col_w.iter().copied().max().unwrap_or(0);
    let max_row_w = row_w.iter().copied().max().unwrap_or(0);
    let mut out = format!("{} {}\n{} {}\n", cols, rows, max_col_w, max_row_w);
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    out.push_str(&join(&col_w));
    out.push('\n');
    out.push_str(&join(&row_w));
    out.push('\n');
    for j in 0..cols {
        let mut pos: Vec<usize> = (0..rows).filter(|&i| m.get(i, j) == 1).map(|i| i + 1).collect();
        pos.resize(max_col_w, 0);
        out.push_str(&join(&pos));
        out.push('\n');
    }
    for i in 0..rows {
        let mut pos: Vec<usize> = (0..cols).filter(|&j| m.get(i, j) == 1).map(|j| j + 1).collect();
        pos.resize(max_row_w, 0);
        out.push_str(&join(&pos));
        out.push('\n');
    }
    out
}

/// Serialize to dense 0/1 rows.
pub fn write_dense01(m: &BinaryMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|b| b.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
