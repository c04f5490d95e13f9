//! Byte-level tokenizer: token id = byte value.

use crate::error::{Error, Result};

pub fn encode(text: impl AsRef<[u8]>) -> Vec<u32> {
    text.as_ref().iter().map(|&b| u32::from(b)).collect()
}

pub fn decode(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            u8::try_from(t).map_err(|_| Error::InvalidToken {
                token: t,
                position,
                vocab: 256,
            })
        })
        .collect()
}
