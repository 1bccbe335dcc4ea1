//! Bit-exact f64 serialization helpers for JSON documents. Matrices are
//! stored as base64 of little-endian IEEE-754 bytes in row-major order, so a
//! write/read round trip reproduces every coefficient exactly.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{MaracError, Result};
use crate::linalg::Mat;

pub(crate) fn encode_f64s(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(b64: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| MaracError::Format(format!("base64: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(MaracError::Format(format!(
            "encoded payload holds {} bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// JSON form of a dense matrix: shape metadata plus base64 f64le payload in
/// row-major order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatJson {
    pub rows: usize,
    pub cols: usize,
    pub data_b64: String,
}

impl From<&Mat> for MatJson {
    fn from(m: &Mat) -> Self {
        let (rows, cols) = m.shape();
        let data_b64 = encode_f64s((0..rows).flat_map(|i| (0..cols).map(move |j| m[(i, j)])));
        MatJson {
            rows,
            cols,
            data_b64,
        }
    }
}

impl MatJson {
    pub fn to_mat(&self) -> Result<Mat> {
        let data = decode_f64s(&self.data_b64, self.rows * self.cols)?;
        Ok(Mat::from_row_slice(self.rows, self.cols, &data))
    }
}
