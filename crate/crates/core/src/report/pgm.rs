//! Binary 16-bit portable graymap (`P5`, maxval 65535, big-endian samples).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAXVAL: u16 = u16::MAX;

fn check_unit(matrix: &Tensor) -> Result<(usize, usize)> {
    if matrix.ndim() != 2 {
        return Err(Error::Contract(format!("heatmap needs a 2-D matrix, got {:?}", matrix.shape())));
    }
    if let Some(x) = matrix.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Contract(format!("heatmap value {x} outside [0,1]; normalize first")));
    }
    Ok((matrix.shape()[0], matrix.shape()[1]))
}

/// Quantizes a `[0,1]` value to a 16-bit sample.
pub fn quantize(x: f64) -> u16 {
    (x * MAXVAL as f64).round() as u16
}

/// Row `i` of the matrix becomes raster row `i`; 0 is black, 1 is white.
pub fn encode_pgm(matrix: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    let (rows, cols) = check_unit(matrix)?;
    let mut out = Vec::with_capacity(rows * cols * 2 + 64);
    out.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{cols} {rows}\n{MAXVAL}\n").as_bytes());
    for &x in matrix.data() {
        out.extend_from_slice(&quantize(x).to_be_bytes());
    }
    Ok(out)
}

/// Parses a 16-bit `P5` graymap back into a `[rows, cols]` matrix in `[0,1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |what: &str| Error::Integrity(format!("pgm: {what}"));
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let mut num = |bytes: &[u8]| -> Result<usize> { token(bytes)?.parse().map_err(|_| bad("bad header number")) };
    let (cols, rows, maxval) = (num(bytes)?, num(bytes)?, num(bytes)?);
    if maxval != MAXVAL as usize {
        return Err(bad("only maxval 65535 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != rows * cols * 2 {
        return Err(bad("raster size does not match header"));
    }
    let data = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / MAXVAL as f64)
        .collect();
    Tensor::new(&[rows, cols], data).map_err(|e| bad(&e.to_string()))
}

pub(crate) fn check_heatmap(matrix: &Tensor) -> Result<(usize, usize)> {
    check_unit(matrix)
}
