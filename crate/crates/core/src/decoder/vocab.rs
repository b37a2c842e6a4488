//! Fixed 47-entry vocabulary: 40 words, three specials and four task tokens.

use crate::fusion::TaskKind;
use crate::synthcorpus::NUM_WORDS;

pub const PAD: usize = NUM_WORDS;
pub const BOS: usize = NUM_WORDS + 1;
pub const EOS: usize = NUM_WORDS + 2;
pub const TASK_BASE: usize = NUM_WORDS + 3;
pub const VOCAB_SIZE: usize = TASK_BASE + 4;

pub fn task_token(task: TaskKind) -> usize {
    TASK_BASE + task.index()
}

pub fn is_word(token: usize) -> bool {
    token < NUM_WORDS
}

pub fn token_name(token: usize) -> String {
    match token {
        t if t < NUM_WORDS => format!("w{t}"),
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        t if t < VOCAB_SIZE => format!("<task:{}>", TaskKind::ALL[t - TASK_BASE].name().to_ascii_lowercase()),
        t => format!("<unk:{t}>"),
    }
}

/// Index-ordered token names, stored in checkpoints.
pub fn vocab_table() -> Vec<String> {
    (0..VOCAB_SIZE).map(token_name).collect()
}

/// Tokens a decoder may emit: every word plus EOS.
pub fn output_tokens() -> Vec<usize> {
    (0..NUM_WORDS).chain(std::iter::once(EOS)).collect()
}

pub fn parse_token(name: &str) -> Option<usize> {
    vocab_table().iter().position(|t| t == name)
}
