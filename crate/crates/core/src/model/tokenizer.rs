//! Byte-level tokenizer: token id = byte value.

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Decode(format!("token id {id} is not a byte")))
        })
        .collect()
}
