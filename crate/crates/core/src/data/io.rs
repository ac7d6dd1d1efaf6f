//! `VPM1` binary matrices and CSV input.
//!
//! Binary layout: the bytes `VPM1`, `rows` and `cols` as little-endian `u64`,
//! then `rows·cols` little-endian `f64` values in row-major order.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VPM1";

pub fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for row in m.row_iter() {
        for v in row.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Fills `buf` or reports how far the stream got.
fn read_exact_at<R: Read>(input: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(Error::Truncated { offset: *offset + got as u64, expected: (buf.len() - got) as u64 });
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

pub fn read_matrix<R: Read>(input: &mut R) -> Result<DMatrix<f64>> {
    let mut offset = 0;
    let mut magic = [0u8; 4];
    read_exact_at(input, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic.to_vec() });
    }
    let mut word = [0u8; 8];
    read_exact_at(input, &mut word, &mut offset)?;
    let rows = u64::from_le_bytes(word);
    read_exact_at(input, &mut word, &mut offset)?;
    let cols = u64::from_le_bytes(word);
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or(Error::Truncated { offset, expected: u64::MAX })?;
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = Vec::with_capacity(count.min(1 << 24) as usize);
    for k in 0..count {
        if let Err(Error::Truncated { offset: at, .. }) = read_exact_at(input, &mut word, &mut offset) {
            return Err(Error::Truncated { offset: at, expected: (count - k) * 8 - (at - offset) });
        }
        values.push(f64::from_le_bytes(word));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix_file(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(&mut f, m)?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_matrix(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Comma-separated floats, one matrix row per line. A first line with any
/// non-numeric cell is taken as a header. Blank lines are skipped.
pub fn read_csv<R: BufRead>(input: R) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<std::result::Result<f64, _>> = cells.iter().map(|c| c.parse::<f64>()).collect();
        if line_no == 1 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        match cols {
            None => cols = Some(cells.len()),
            Some(n) if n != cells.len() => {
                return Err(Error::CsvRagged { line: line_no, found: cells.len(), expected: n });
            }
            _ => {}
        }
        for (k, (p, cell)) in parsed.into_iter().zip(&cells).enumerate() {
            values.push(p.map_err(|_| Error::CsvCell { line: line_no, column: k + 1, cell: cell.to_string() })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = DMatrix::from_fn(5, 7, |i, j| (i as f64 - 2.3) * (j as f64 + 0.1).sin());
        let mut m2 = m.clone();
        m2[(0, 0)] = -0.0;
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m2).unwrap();
        assert_eq!(&buf[..4], b"VPM1");
        let back = read_matrix(&mut buf.as_slice()).unwrap();
        assert!(back.iter().zip(m2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_and_truncated_inputs() {
        assert!(matches!(read_matrix(&mut &b""[..]), Err(Error::Truncated { offset: 0, .. })));
        let mut buf = Vec::new();
        write_matrix(&mut buf, &DMatrix::from_element(2, 2, 1.0)).unwrap();
        buf.truncate(buf.len() - 3);
        match read_matrix(&mut buf.as_slice()) {
            Err(Error::Truncated { offset, expected }) => {
                assert_eq!(offset, 20 + 29);
                assert_eq!(expected, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(read_matrix(&mut &b"VPM2xxxxxxxx"[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn csv_parsing() {
        let m = read_csv("1,2\n3,4".as_bytes()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let h = read_csv("a,b\n1,2\n".as_bytes()).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert!(matches!(read_csv("1,2\n3,x\n".as_bytes()), Err(Error::CsvCell { line: 2, column: 2, .. })));
        assert!(matches!(read_csv("1,2\n3\n".as_bytes()), Err(Error::CsvRagged { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_any_finite(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1e3..1e3));
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            prop_assert_eq!(read_matrix(&mut buf.as_slice()).unwrap(), m);
        }
    }
}
