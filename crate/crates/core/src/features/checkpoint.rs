//! Weight checkpoints: a key-value text header describing the architecture,
//! terminated by an `end` line, followed by little-endian `f64` values of `θ`
//! in layout order and then `vec(W)` in column-major order.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::arch::ArchSpec;
use crate::error::{Error, Result};

const MAGIC_LINE: &str = "vpro-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub theta: DVector<f64>,
    pub w: DMatrix<f64>,
}

fn header(ck: &Checkpoint) -> String {
    let mut h = format!("{MAGIC_LINE}\n");
    match &ck.arch {
        ArchSpec::Mlp { widths } => {
            let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
            h += &format!("kind = mlp\nwidths = {}\n", w.join(","));
        }
        ArchSpec::NeuralOde { n_in, width, final_time, cells, gamma } => {
            h += &format!(
                "kind = neural_ode\nn_in = {n_in}\nwidth = {width}\nfinal_time = {final_time:?}\ncells = {cells}\ngamma = {gamma:?}\n"
            );
        }
    }
    h += &format!("theta_len = {}\nw_rows = {}\nw_cols = {}\nend\n", ck.theta.len(), ck.w.nrows(), ck.w.ncols());
    h
}

pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<()> {
    if ck.theta.len() != ck.arch.layout().len() {
        return Err(Error::ShapeMismatch("checkpoint weights do not match the architecture".into()));
    }
    out.write_all(header(ck).as_bytes())?;
    for v in ck.theta.iter().chain(ck.w.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, ck)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Checkpoint> {
    let mut fields = std::collections::BTreeMap::new();
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("header not terminated by `end`".into()));
        }
        let l = line.trim_end_matches('\n');
        if first {
            if l != MAGIC_LINE {
                return Err(Error::Checkpoint(format!("unexpected first line {l:?}")));
            }
            first = false;
            continue;
        }
        if l == "end" {
            break;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Checkpoint(format!("malformed header line {l:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| Error::Checkpoint(format!("missing key {k}")));
    let num =
        |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad integer for {k}"))) };
    let float =
        |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad float for {k}"))) };
    let arch = match get("kind")?.as_str() {
        "mlp" => ArchSpec::Mlp {
            widths: get("widths")?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Checkpoint("bad widths".into())))
                .collect::<Result<_>>()?,
        },
        "neural_ode" => ArchSpec::NeuralOde {
            n_in: num("n_in")?,
            width: num("width")?,
            final_time: float("final_time")?,
            cells: num("cells")?,
            gamma: float("gamma")?,
        },
        other => return Err(Error::Checkpoint(format!("unknown architecture kind {other:?}"))),
    };
    arch.validate()?;
    let theta_len = num("theta_len")?;
    if theta_len != arch.layout().len() {
        return Err(Error::Checkpoint("theta_len disagrees with the architecture".into()));
    }
    let (rows, cols) = (num("w_rows")?, num("w_cols")?);
    let total = theta_len + rows * cols;
    let mut bytes = Vec::with_capacity(total * 8);
    input.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(Error::Truncated { offset: bytes.len() as u64, expected: (total * 8) as u64 });
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Checkpoint {
        arch,
        theta: DVector::from_column_slice(&vals[..theta_len]),
        w: DMatrix::from_column_slice(rows, cols, &vals[theta_len..]),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
