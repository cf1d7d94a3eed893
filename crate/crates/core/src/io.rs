//! Matrix Market and LIBSVM readers, and the synthetic test matrices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, ProblemMatrix, Symmetry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MmFormat {
    Coordinate,
    Array,
}

/// Reads a real Matrix Market file (coordinate or array, general or
/// symmetric) into a dense problem matrix. Symmetric files mirror the
/// stored triangle and are flagged symmetric.
pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<ProblemMatrix> {
    read_matrix_market(BufReader::new(File::open(path)?))
}

pub fn read_matrix_market(reader: impl BufRead) -> Result<ProblemMatrix> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let header = header?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(Error::parse(
            1,
            "expected `%%MatrixMarket matrix <format> <field> <symmetry>`",
        ));
    }
    let format = match fields[2].as_str() {
        "coordinate" => MmFormat::Coordinate,
        "array" => MmFormat::Array,
        other => return Err(Error::parse(1, format!("unknown format `{other}`"))),
    };
    match fields[3].as_str() {
        "real" | "double" | "integer" => {}
        other => {
            return Err(Error::parse(
                1,
                format!("unsupported field `{other}`; only real matrices are read"),
            ))
        }
    }
    let symmetric = match fields[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(Error::parse(1, format!("unsupported symmetry `{other}`"))),
    };

    let mut data_lines = lines.filter_map(|(no, line)| match line {
        Ok(l) if l.trim().is_empty() || l.trim_start().starts_with('%') => None,
        other => Some((no, other)),
    });
    let (no, size) = data_lines
        .next()
        .ok_or_else(|| Error::parse(2, "missing size line"))?;
    let size = numbers::<usize>(&size?, no)?;
    let (rows, cols) = match (format, size.as_slice()) {
        (MmFormat::Coordinate, [r, c, _]) | (MmFormat::Array, [r, c]) => (*r, *c),
        _ => return Err(Error::parse(no, "malformed size line")),
    };
    if rows != cols || rows == 0 {
        return Err(Error::dim(format!(
            "problem matrix must be square and nonempty, got {rows}x{cols}"
        )));
    }
    let n = rows;
    let mut m = Matrix::zeros(n, n);

    match format {
        MmFormat::Coordinate => {
            let expected = size[2];
            let mut seen = 0;
            for (no, line) in data_lines.by_ref() {
                if seen == expected {
                    return Err(Error::parse(
                        no,
                        format!("more than the {expected} declared entries"),
                    ));
                }
                let line = line?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::parse(no, "expected `row col value`"));
                }
                let i = index(parts[0], n, no)?;
                let j = index(parts[1], n, no)?;
                let v = value(parts[2], no)?;
                if symmetric && j > i {
                    return Err(Error::parse(no, "symmetric files store the lower triangle only"));
                }
                m[(i, j)] += v;
                if symmetric && i != j {
                    m[(j, i)] += v;
                }
                seen += 1;
            }
            if seen < expected {
                return Err(Error::parse(
                    0,
                    format!("expected {expected} entries, found {seen}"),
                ));
            }
        }
        MmFormat::Array => {
            let positions: Vec<(usize, usize)> = (0..n)
                .flat_map(|j| (if symmetric { j } else { 0 }..n).map(move |i| (i, j)))
                .collect();
            let expected = positions.len();
            let mut seen = 0;
            for (no, line) in data_lines.by_ref() {
                let line = line?;
                for tok in line.split_whitespace() {
                    let Some(&(i, j)) = positions.get(seen) else {
                        return Err(Error::parse(
                            no,
                            format!("more than the {expected} expected values"),
                        ));
                    };
                    let v = value(tok, no)?;
                    m[(i, j)] = v;
                    m[(j, i)] = if symmetric { v } else { m[(j, i)] };
                    seen += 1;
                }
            }
            if seen < expected {
                return Err(Error::parse(
                    0,
                    format!("expected {expected} entries, found {seen}"),
                ));
            }
        }
    }
    ProblemMatrix::new(
        m,
        if symmetric {
            Symmetry::Symmetric
        } else {
            Symmetry::General
        },
    )
}

/// Writes a dense array-format file, general or symmetric.
pub fn write_matrix_market(path: impl AsRef<Path>, m: &Matrix, symmetric: bool) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_market_to(&mut out, m, symmetric)?;
    out.flush()?;
    Ok(())
}

pub fn write_matrix_market_to(out: &mut impl Write, m: &Matrix, symmetric: bool) -> Result<()> {
    let kind = if symmetric { "symmetric" } else { "general" };
    writeln!(out, "%%MatrixMarket matrix array real {kind}")?;
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    for j in 0..m.ncols() {
        for i in (if symmetric { j } else { 0 })..m.nrows() {
            writeln!(out, "{:e}", m[(i, j)])?;
        }
    }
    Ok(())
}

/// `AᵀA + λI` for the data matrix A stored in LIBSVM format
/// (`label index:value ...`, 1-based indices). The dimension is the
/// largest feature index seen.
pub fn build_ridge_hessian(path: impl AsRef<Path>, lambda: f64) -> Result<ProblemMatrix> {
    read_ridge_hessian(BufReader::new(File::open(path)?), lambda)
}

pub fn read_ridge_hessian(reader: impl BufRead, lambda: f64) -> Result<ProblemMatrix> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!(
            "regularization must be nonnegative, got {lambda}"
        )));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut n = 0;
    for (i, line) in reader.lines().enumerate() {
        let no = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let label = parts.next().expect("nonempty line");
        label
            .parse::<f64>()
            .map_err(|_| Error::parse(no, format!("bad label `{label}`")))?;
        let mut row = Vec::new();
        for tok in parts {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(no, format!("expected `index:value`, found `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(no, format!("bad feature index `{idx}`")))?;
            if idx == 0 {
                return Err(Error::parse(no, "feature indices are 1-based"));
            }
            let val = value(val, no)?;
            n = n.max(idx);
            row.push((idx - 1, val));
        }
        rows.push(row);
    }
    if n == 0 {
        return Err(Error::config("data has no features"));
    }
    let mut h = Matrix::identity(n, n) * lambda;
    for row in &rows {
        for &(i, vi) in row {
            for &(j, vj) in row {
                h[(i, j)] += vi * vj;
            }
        }
    }
    ProblemMatrix::spd(h.clone()).or_else(|_| ProblemMatrix::symmetric(h))
}

/// `ĀᵀĀ` with `Ā` an n×n matrix of i.i.d. uniform(0,1) entries drawn from
/// a stream seeded by `seed`.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<ProblemMatrix> {
    if n < 2 {
        return Err(Error::config(format!("synthetic matrices need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bar = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
    synthetic_from_factor(&bar)
}

/// `ĀᵀĀ` for a given `Ā`, flagged SPD.
pub fn synthetic_from_factor(bar: &Matrix) -> Result<ProblemMatrix> {
    ProblemMatrix::spd(bar.tr_mul(bar))
}

/// Fraction of nonzero entries.
pub fn density(m: &Matrix) -> f64 {
    let nnz = m.iter().filter(|v| **v != 0.0).count();
    nnz as f64 / (m.nrows() * m.ncols()).max(1) as f64
}

fn numbers<T: std::str::FromStr>(line: &str, no: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::parse(no, format!("bad number `{t}`")))
        })
        .collect()
}

fn index(tok: &str, n: usize, no: usize) -> Result<usize> {
    let i: usize = tok
        .parse()
        .map_err(|_| Error::parse(no, format!("bad index `{tok}`")))?;
    if i == 0 || i > n {
        return Err(Error::parse(no, format!("index {i} outside 1..={n}")));
    }
    Ok(i - 1)
}

fn value(tok: &str, no: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(no, format!("bad value `{tok}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(no, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}
