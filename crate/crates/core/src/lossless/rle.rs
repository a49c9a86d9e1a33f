//! Byte-level run-length coding: `(symbol, count)` pairs with `count` in
//! `1..=255`.

use crate::error::{Error, Result};

pub const MAX_RUN: usize = 255;

/// Runs in `bytes` when every run longer than [`MAX_RUN`] is split.
pub fn count_runs(bytes: &[u8]) -> usize {
    let mut runs = 0;
    let mut i = 0;
    while i < bytes.len() {
        let sym = bytes[i];
        let mut len = 1;
        while i + len < bytes.len() && bytes[i + len] == sym && len < MAX_RUN {
            len += 1;
        }
        runs += 1;
        i += len;
    }
    runs
}

pub fn encode(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() / 4 + 2);
    let mut i = 0;
    while i < bytes.len() {
        let sym = bytes[i];
        let mut len = 1;
        while i + len < bytes.len() && bytes[i + len] == sym && len < MAX_RUN {
            len += 1;
        }
        out.push(sym);
        out.push(len as u8);
        i += len;
    }
    out
}

pub fn decode(payload: &[u8], raw_size: usize) -> Result<Vec<u8>> {
    if !payload.len().is_multiple_of(2) {
        return Err(Error::CorruptPayload("odd-length run-length payload".into()));
    }
    let mut out = Vec::with_capacity(raw_size);
    for pair in payload.chunks_exact(2) {
        let (sym, len) = (pair[0], pair[1] as usize);
        if len == 0 {
            return Err(Error::CorruptPayload("zero-length run".into()));
        }
        if out.len() + len > raw_size {
            return Err(Error::CorruptPayload("runs exceed the declared size".into()));
        }
        out.resize(out.len() + len, sym);
    }
    if out.len() != raw_size {
        return Err(Error::CorruptPayload(format!(
            "runs decode to {} bytes, expected {raw_size}",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_counts() {
        assert_eq!(count_runs(&[7; 200]), 1);
        assert_eq!(count_runs(&[7; 256]), 2);
        assert_eq!(count_runs(&[7; 510]), 2);
        let alt: Vec<u8> = (0..256).map(|i| (i % 2) as u8).collect();
        assert_eq!(count_runs(&alt), 256);
        assert_eq!(count_runs(&[]), 0);
    }

    #[test]
    fn codec() {
        assert_eq!(encode(&[9; 200]), vec![9, 200]);
        let data: Vec<u8> = (0..2000u32).map(|i| (i / 300) as u8).collect();
        let enc = encode(&data);
        assert_eq!(enc.len(), 2 * count_runs(&data));
        assert!(enc.chunks(2).all(|p| p[1] >= 1));
        assert_eq!(decode(&enc, data.len()).unwrap(), data);
    }

    #[test]
    fn corrupt_payloads() {
        assert!(decode(&[1], 1).is_err());
        assert!(decode(&[1, 0], 0).is_err());
        assert!(decode(&[1, 3], 2).is_err());
        assert!(decode(&[1, 3], 4).is_err());
    }
}
