//! Standalone `PGT1` reader/writer: magic, u32 rank, u32 dims, f32 values,
//! all little-endian.

use crate::OracleError;

#[derive(Clone, Debug, PartialEq)]
pub struct Pgt {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Pgt {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = b"PGT1".to_vec();
        out.extend((self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, OracleError> {
        let bad = |why: &str| OracleError::Format(why.to_string());
        let word = |i: usize| -> Result<u32, OracleError> {
            let b = bytes.get(i..i + 4).ok_or_else(|| bad("truncated"))?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        if bytes.get(..4) != Some(b"PGT1".as_slice()) {
            return Err(bad("missing PGT1 magic"));
        }
        let rank = word(4)? as usize;
        if rank > 16 {
            return Err(bad("rank too large"));
        }
        let shape: Vec<usize> = (0..rank).map(|k| word(8 + 4 * k).map(|d| d as usize)).collect::<Result<_, _>>()?;
        let start = 8 + 4 * rank;
        let n: usize = shape.iter().product();
        if bytes.len() != start + 4 * n {
            return Err(bad("payload length does not match shape"));
        }
        let data = (0..n)
            .map(|i| f32::from_le_bytes(bytes[start + 4 * i..start + 4 * i + 4].try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }
}
