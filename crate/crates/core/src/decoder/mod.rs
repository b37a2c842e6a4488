//! Causal language decoder, LoRA fine-tuning surface and decoding.

mod infer;
mod search;
mod transformer;
mod vocab;

pub use infer::{InferenceDecoder, KvCache};
pub use search::{argmax, beam, greedy, log_softmax, BeamConfig, Hypothesis, StepModel};
pub use transformer::{is_base_param, teacher_forcing, Decoder, DecoderConfig, PackedLogits, Segment, LN_EPS};
pub use vocab::{
    is_word, output_tokens, parse_token, task_token, token_name, vocab_table, BOS, EOS, PAD, TASK_BASE, VOCAB_SIZE,
};
