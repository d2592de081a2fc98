//! Triplet CSV serialization: a `dim=<n>` line followed by `row,col,value` lines.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::sparse::{SparseRows, SparseSymmetric};
use crate::error::{invalid, Result};

pub fn write_triplets<W: Write>(m: &SparseSymmetric, mut w: W) -> Result<()> {
    writeln!(w, "dim={}", m.dim())?;
    for (r, c, v) in m.iter() {
        writeln!(w, "{r},{c},{v}")?;
    }
    Ok(())
}

pub fn save_triplets(m: &SparseSymmetric, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_triplets(m, std::io::BufWriter::new(f))
}

/// Writes a rectangular operator; the header carries `dim=<rows>x<cols>`.
pub fn write_rows_triplets<W: Write>(m: &SparseRows, mut w: W) -> Result<()> {
    writeln!(w, "dim={}x{}", m.nrows(), m.ncols())?;
    for (r, c, v) in m.iter() {
        writeln!(w, "{r},{c},{v}")?;
    }
    Ok(())
}

fn parse_entries(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with("row")) {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(r), Some(c), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return invalid(format!("malformed triplet line `{line}`"));
        };
        let parsed = (r.parse::<usize>(), c.parse::<usize>(), v.parse::<f64>());
        let (Ok(r), Ok(c), Ok(v)) = parsed else {
            return invalid(format!("malformed triplet line `{line}`"));
        };
        out.push((r, c, v));
    }
    Ok(out)
}

pub fn read_triplets<R: Read>(r: R) -> Result<SparseSymmetric> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let Some(dim) = header.trim().strip_prefix("dim=").and_then(|d| d.parse::<usize>().ok()) else {
        return invalid(format!("expected `dim=<n>` header, found `{header}`"));
    };
    let entries = parse_entries(lines)?;
    SparseSymmetric::from_lower_triplets(dim, entries)
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<SparseSymmetric> {
    read_triplets(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::builders::build_ar1_precision;

    #[test]
    fn round_trip_is_exact() {
        let q = build_ar1_precision(7, 0.37, 2.3).unwrap();
        let mut buf = Vec::new();
        write_triplets(&q, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("dim=7\n"));
        assert_eq!(read_triplets(&buf[..]).unwrap(), q);
    }

    #[test]
    fn rejects_bad_header_and_lines() {
        assert!(read_triplets("3\n0,0,1\n".as_bytes()).is_err());
        assert!(read_triplets("dim=2\n0,0\n".as_bytes()).is_err());
        assert!(read_triplets("dim=2\n0,1,1\n".as_bytes()).is_err());
        assert!(read_triplets("dim=2\nrow,col,value\n1,0,0.5\n".as_bytes()).is_ok());
    }
}
