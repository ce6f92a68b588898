//! Fixed byte-level vocabulary: three specials, then the 256 byte values.
//! No merges, no normalization — every byte string tokenizes losslessly.

use crate::error::{PopError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 259;

/// `[BOS] ++ [b + 3 for each byte]`.
pub fn encode(bytes: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(bytes.len() + 1);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as u32 + BYTE_OFFSET));
    ids
}

pub fn encode_str(text: &str) -> Vec<u32> {
    encode(text.as_bytes())
}

/// Inverse of `encode` on well-formed sequences: BOS and PAD are dropped,
/// EOS terminates, byte tokens map back to bytes. Ids outside the
/// vocabulary are an error.
pub fn decode(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD | BOS => {}
            EOS => break,
            _ if (id as usize) < VOCAB_SIZE => out.push((id - BYTE_OFFSET) as u8),
            _ => {
                return Err(PopError::Index {
                    what: "token id",
                    index: id as usize,
                    bound: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(out)
}
