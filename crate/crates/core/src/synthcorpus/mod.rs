//! Deterministic synthetic tri-modal language and its corpus files.
//!
//! Words are spelled as phoneme sequences; the lip stream shows their visemes
//! (a many-to-one projection of phonemes, so some words are homophenes) and
//! the sign stream shows their gloss (ten word pairs share a gloss, so only
//! the mouthing on the lip stream separates them).

mod augment;
pub mod container;
mod generate;
mod lexicon;
mod sample;

pub use augment::{
    babble, mix_babble, snr_gain, word_drop_augment, word_drop_with_fraction, BABBLE_SPEAKERS, TRAIN_SNR_DB,
};
pub use generate::{
    generate_corpus, read_manifest, sha256_hex, split_file_name, Corpus, CorpusConfig, CorpusManifest, Split,
    SplitSizes, Splits, MANIFEST_FILE,
};
pub use lexicon::{
    viseme_of, Lexicon, AUDIO_DIMS, LIP_DIMS, NUM_GLOSSES, NUM_MERGED_PAIRS, NUM_PHONEMES, NUM_VISEMES, NUM_WORDS,
    SIGN_DIMS,
};
pub use sample::{
    render_sample, render_sample_with, render_stream, CorpusTag, Modality, ModalityStream, Sample,
    AUDIO_FRAMES_PER_WORD, DEFAULT_NOISE_SIGMA, LIP_FRAMES_PER_WORD, SIGN_FRAMES_PER_WORD,
};
