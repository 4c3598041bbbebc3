//! Raw matrix dump: one JSON manifest line `{"rows":R,"cols":C}` followed by
//! row-major little-endian f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &Header {
            rows: m.nrows(),
            cols: m.ncols(),
        },
    )?;
    w.write_all(b"\n")?;
    for &v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| Error::DataFormat {
            path: path.display().to_string(),
            reason: "missing manifest line".into(),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let h: Header = serde_json::from_slice(&header)?;
    let mut buf = vec![0u8; h.rows * h.cols * 8];
    r.read_exact(&mut buf).map_err(|_| Error::DataFormat {
        path: path.display().to_string(),
        reason: "matrix blob shorter than manifest claims".into(),
    })?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((h.rows, h.cols), data).unwrap())
}
