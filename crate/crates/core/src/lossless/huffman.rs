//! Canonical Huffman coding over bytes.
//!
//! Payload: 256 one-byte code lengths (0 = symbol absent), the decoded
//! length as u64 LE, then the codes packed MSB-first and zero-padded to a
//! whole byte.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const TABLE_BYTES: usize = 256;
pub const HEADER_BYTES: usize = TABLE_BYTES + 8;
const MAX_CODE_LEN: u8 = 127;

pub fn histogram(bytes: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    hist
}

/// Optimal code lengths for a histogram. A lone symbol gets length 1.
/// Ties are broken by node id, so the result is deterministic.
pub fn code_lengths(hist: &[u64; 256]) -> [u8; 256] {
    let mut lengths = [0u8; 256];
    let present: Vec<usize> = (0..256).filter(|&s| hist[s] > 0).collect();
    match present.len() {
        0 => return lengths,
        1 => {
            lengths[present[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // parent links; leaves are 0..256, internal nodes follow
    let mut parent: Vec<usize> = vec![usize::MAX; 256];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        present.iter().map(|&s| Reverse((hist[s], s))).collect();
    while heap.len() > 1 {
        let Reverse((fa, a)) = heap.pop().unwrap();
        let Reverse((fb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((fa + fb, id)));
    }
    for &s in &present {
        let mut depth = 0u32;
        let mut node = s;
        while parent[node] != usize::MAX {
            node = parent[node];
            depth += 1;
        }
        lengths[s] = depth.min(255) as u8;
    }
    lengths
}

/// Total code bits for `hist` under `lengths`.
pub fn coded_bits(hist: &[u64; 256], lengths: &[u8; 256]) -> u64 {
    hist.iter()
        .zip(lengths)
        .map(|(&f, &l)| f * l as u64)
        .sum()
}

/// Canonical code per symbol, right-aligned.
fn canonical_codes(lengths: &[u8; 256]) -> [u128; 256] {
    let mut order: Vec<usize> = (0..256).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = [0u128; 256];
    let mut code = 0u128;
    let mut prev_len = 0u8;
    for (i, &s) in order.iter().enumerate() {
        let len = lengths[s];
        if i > 0 {
            code = (code + 1) << (len - prev_len);
        } else {
            code = 0;
        }
        codes[s] = code;
        prev_len = len;
    }
    codes
}

struct BitWriter {
    out: Vec<u8>,
    acc: u8,
    filled: u32,
}

impl BitWriter {
    fn put(&mut self, code: u128, len: u8) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | ((code >> i) & 1) as u8;
            self.filled += 1;
            if self.filled == 8 {
                self.out.push(self.acc);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc << (8 - self.filled));
        }
        self.out
    }
}

pub fn encode(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hist = histogram(bytes);
    let lengths = code_lengths(&hist);
    let codes = canonical_codes(&lengths);
    let bits = coded_bits(&hist, &lengths);
    let mut out = Vec::with_capacity(HEADER_BYTES + bits.div_ceil(8) as usize);
    out.extend_from_slice(&lengths);
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    let mut w = BitWriter {
        out,
        acc: 0,
        filled: 0,
    };
    for &b in bytes {
        w.put(codes[b as usize], lengths[b as usize]);
    }
    Ok(w.finish())
}

/// Decoded bytes and the number of code bits consumed.
pub fn decode_counting(payload: &[u8]) -> Result<(Vec<u8>, u64)> {
    if payload.len() < HEADER_BYTES {
        return Err(Error::CorruptPayload("huffman payload shorter than its header".into()));
    }
    let mut lengths = [0u8; 256];
    lengths.copy_from_slice(&payload[..TABLE_BYTES]);
    let n = u64::from_le_bytes(payload[TABLE_BYTES..HEADER_BYTES].try_into().unwrap()) as usize;
    let data = &payload[HEADER_BYTES..];

    if lengths.iter().any(|&l| l > MAX_CODE_LEN) {
        return Err(Error::CorruptPayload("code length out of range".into()));
    }
    let mut count_by_len = [0u32; MAX_CODE_LEN as usize + 1];
    for &l in lengths.iter().filter(|&&l| l > 0) {
        count_by_len[l as usize] += 1;
    }
    // Kraft: sum 2^-len <= 1, checked with integer arithmetic
    let mut kraft: u128 = 0;
    for (l, &c) in count_by_len.iter().enumerate().skip(1) {
        kraft += (c as u128) << (MAX_CODE_LEN as usize - l);
    }
    if kraft > 1u128 << MAX_CODE_LEN {
        return Err(Error::CorruptPayload("code lengths violate the Kraft inequality".into()));
    }
    let mut symbols: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
    symbols.sort_by_key(|&s| (lengths[s as usize], s));
    if symbols.is_empty() {
        return if n == 0 {
            Ok((Vec::new(), 0))
        } else {
            Err(Error::CorruptPayload("empty code table".into()))
        };
    }
    if n > data.len().saturating_mul(8) {
        return Err(Error::CorruptPayload("declared length exceeds the coded bits".into()));
    }

    // first canonical code and first symbol slot for every length
    let mut first_code = [0u128; MAX_CODE_LEN as usize + 2];
    let mut first_slot = [0usize; MAX_CODE_LEN as usize + 2];
    let mut code = 0u128;
    let mut slot = 0usize;
    for l in 1..=MAX_CODE_LEN as usize {
        code <<= 1;
        first_code[l] = code;
        first_slot[l] = slot;
        code += count_by_len[l] as u128;
        slot += count_by_len[l] as usize;
    }

    let total_bits = data.len() as u64 * 8;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0u64;
    while out.len() < n {
        let mut code = 0u128;
        let mut len = 0usize;
        loop {
            if pos >= total_bits || len >= MAX_CODE_LEN as usize {
                return Err(Error::CorruptPayload("huffman stream ended mid-code".into()));
            }
            let bit = (data[(pos / 8) as usize] >> (7 - pos % 8)) & 1;
            pos += 1;
            code = (code << 1) | bit as u128;
            len += 1;
            let offset = code.wrapping_sub(first_code[len]);
            if code >= first_code[len] && offset < count_by_len[len] as u128 {
                out.push(symbols[first_slot[len] + offset as usize]);
                break;
            }
        }
    }
    if pos.div_ceil(8) != data.len() as u64 {
        return Err(Error::CorruptPayload("trailing bytes after huffman stream".into()));
    }
    Ok((out, pos))
}

pub fn decode(payload: &[u8]) -> Result<Vec<u8>> {
    decode_counting(payload).map(|(out, _)| out)
}
