//! Matrix Market text I/O.
//!
//! Sparse operators are written in `coordinate real general` form, dense
//! matrices and vectors in `array real general` form (column-major, one
//! value per line). Values use Rust's shortest round-trip formatting, so a
//! write/read cycle is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linop::SparseMap;

#[derive(Debug)]
pub enum MatrixMarket {
    Dense(DMatrix<f64>),
    Sparse(SparseMap),
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn write_dense(path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "%%MatrixMarket matrix array real general").map_err(io)?;
    writeln!(w, "{} {}", mat.nrows(), mat.ncols()).map_err(io)?;
    for v in mat.iter() {
        writeln!(w, "{v:?}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "%%MatrixMarket matrix array real general").map_err(io)?;
    writeln!(w, "{} 1", v.len()).map_err(io)?;
    for x in v.iter() {
        writeln!(w, "{x:?}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_sparse(path: &Path, mat: &SparseMap) -> Result<()> {
    use crate::linop::LinearMap;
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
    writeln!(w, "{} {} {}", mat.rows(), mat.cols(), mat.nnz()).map_err(io)?;
    for (i, j, v) in mat.triplets() {
        writeln!(w, "{} {} {v:?}", i + 1, j + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read(path: &Path) -> Result<MatrixMarket> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn read_dense(path: &Path) -> Result<DMatrix<f64>> {
    match read(path)? {
        MatrixMarket::Dense(m) => Ok(m),
        MatrixMarket::Sparse(s) => Ok(s.to_dense()),
    }
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_dense(path)?;
    if m.ncols() != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("expected a column vector, found {}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

pub fn read_sparse(path: &Path) -> Result<SparseMap> {
    match read(path)? {
        MatrixMarket::Sparse(s) => Ok(s),
        MatrixMarket::Dense(m) => {
            let trips: Vec<_> = (0..m.ncols())
                .flat_map(|j| (0..m.nrows()).map(move |i| (i, j)))
                .filter(|&(i, j)| m[(i, j)] != 0.0)
                .map(|(i, j)| (i, j, m[(i, j)]))
                .collect();
            SparseMap::from_triplets(m.nrows(), m.ncols(), trips)
        }
    }
}

fn parse(text: &str) -> std::result::Result<MatrixMarket, String> {
    let mut lines = text.lines();
    let banner = lines.next().ok_or("empty file")?;
    let tokens: Vec<String> = banner
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(format!("bad banner: {banner}"));
    }
    if tokens[3] != "real" && tokens[3] != "integer" {
        return Err(format!("unsupported field type {}", tokens[3]));
    }
    let symmetric = match tokens[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(format!("unsupported symmetry {other}")),
    };
    let mut body = lines
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('%'));
    let size_line = body.next().ok_or("missing size line")?;
    let sizes: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad size {t}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("bad value {t}: {e}"));

    match tokens[2].as_str() {
        "array" => {
            let [rows, cols] = sizes[..] else {
                return Err(format!("array size line needs 2 fields: {size_line}"));
            };
            let mut mat = DMatrix::zeros(rows, cols);
            if symmetric {
                for j in 0..cols {
                    for i in j..rows {
                        let v = num(body.next().ok_or("truncated array")?)?;
                        mat[(i, j)] = v;
                        mat[(j, i)] = v;
                    }
                }
            } else {
                for j in 0..cols {
                    for i in 0..rows {
                        mat[(i, j)] = num(body.next().ok_or("truncated array")?)?;
                    }
                }
            }
            Ok(MatrixMarket::Dense(mat))
        }
        "coordinate" => {
            let [rows, cols, nnz] = sizes[..] else {
                return Err(format!("coordinate size line needs 3 fields: {size_line}"));
            };
            let mut trips = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let line = body.next().ok_or("truncated coordinate list")?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() < 3 {
                    return Err(format!("bad entry line: {line}"));
                }
                let i: usize = f[0].parse().map_err(|e| format!("bad row {}: {e}", f[0]))?;
                let j: usize = f[1].parse().map_err(|e| format!("bad col {}: {e}", f[1]))?;
                if i == 0 || j == 0 {
                    return Err("indices are 1-based".into());
                }
                let v = num(f[2])?;
                trips.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    trips.push((j - 1, i - 1, v));
                }
            }
            SparseMap::from_triplets(rows, cols, trips)
                .map(MatrixMarket::Sparse)
                .map_err(|e| e.to_string())
        }
        other => Err(format!("unsupported format {other}")),
    }
}
