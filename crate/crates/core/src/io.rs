//! Header-less numeric CSV matrices (adjacency, distances, masks, fields).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Formats a matrix as header-less CSV. `{}` on `f64` prints the shortest
/// string that parses back to the same bits, so files round-trip exactly.
pub fn matrix_to_csv(m: &Tensor2D) -> String {
    let mut out = String::with_capacity(m.len() * 8);
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Tensor2D) -> Result<()> {
    write_file(path, matrix_to_csv(m).as_bytes())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor2D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, &path.display().to_string())
}

pub fn parse_matrix_csv(text: &str, origin: &str) -> Result<Tensor2D> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    message: format!("not a number: {cell:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Tensor2D::from_rows(&rows)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_ragged_and_garbage() {
        let err = parse_matrix_csv("1,2\n3\n", "m.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_matrix_csv("1,x\n", "m.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn awkward_floats_round_trip() {
        let m = Tensor2D::from_rows(&[[0.1 + 0.2, 1e-300, -0.0], [std::f64::consts::PI, 1.0 / 3.0, 5e20]])
            .unwrap();
        let back = parse_matrix_csv(&matrix_to_csv(&m), "mem").unwrap();
        let bits = |t: &Tensor2D| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
    }
}
