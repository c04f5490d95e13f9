//! Seeded synthetic text for calibration and prompt generation.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::seeded_rng;
use crate::model::tokenizer;
use crate::search::{TaskMode, TaskSpec};

const WORDS: &[&str] = &[
    "the", "a", "model", "layer", "rank", "signal", "noise", "data", "token", "weight", "small",
    "large", "fast", "slow", "keeps", "drops", "maps", "reads", "writes", "finds", "low", "high",
    "of", "to", "and", "in", "on", "with", "every", "some", "matrix", "vector", "error", "sum",
    "step", "gate", "head", "path", "loss", "bound",
];

/// Lowercase sentences of 3 to 9 words, one per line, until `n_bytes` bytes.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> String {
    let mut rng = seeded_rng(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        let n = rng.random_range(3..=9);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(WORDS.choose(&mut rng).expect("nonempty word list"));
        }
        out.push_str(".\n");
    }
    out.truncate(n_bytes);
    out
}

/// Byte tokens of a text file.
pub fn read_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::CorpusTooSmall {
            available: 0,
            required: 1,
        });
    }
    Ok(tokenizer::encode(&bytes))
}

/// `n` prompts of `len` bytes cut from synthetic text, none containing a
/// newline.
pub fn synthetic_prompts(n: usize, len: usize, seed: u64) -> Vec<String> {
    let text = synthetic_text((len + 1) * n * 8 + 256, seed);
    let lines: Vec<&str> = text.lines().collect();
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let mut prompts = Vec::with_capacity(n);
    while prompts.len() < n {
        let line = lines.choose(&mut rng).expect("nonempty text");
        if line.len() < len {
            // pad short lines with the following words
            let joined = format!("{line} {}", lines.choose(&mut rng).expect("nonempty text"));
            if joined.len() >= len {
                prompts.push(joined[..len].to_string());
            }
            continue;
        }
        let start = rng.random_range(0..=line.len() - len);
        prompts.push(line[start..start + len].to_string());
    }
    prompts
}

/// A baseline-agreement task over synthetic prompts.
pub fn agreement_task(n_prompts: usize, prompt_len: usize, max_new_tokens: usize, epsilon: f64, seed: u64) -> TaskSpec {
    TaskSpec {
        mode: TaskMode::BaselineAgreement,
        prompts: synthetic_prompts(n_prompts, prompt_len, seed),
        expected: Vec::new(),
        max_new_tokens,
        epsilon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_seeded_and_sized() {
        let a = synthetic_text(1000, 3);
        assert_eq!(a.len(), 1000);
        assert_eq!(a, synthetic_text(1000, 3));
        assert_ne!(a, synthetic_text(1000, 4));
        assert!(a.contains('\n'));
    }

    #[test]
    fn prompts_have_fixed_length_and_no_newline() {
        let p = synthetic_prompts(40, 12, 1);
        assert_eq!(p.len(), 40);
        assert!(p.iter().all(|s| s.len() == 12 && !s.contains('\n')));
        assert!(agreement_task(5, 6, 3, 0.05, 0).validate().is_ok());
    }
}
