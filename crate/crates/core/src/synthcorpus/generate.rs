use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{decode_split, encode_split};
use super::lexicon::Lexicon;
use super::sample::{render_sample_with, CorpusTag, Sample, DEFAULT_NOISE_SIGMA};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub signed: SplitSizes,
    pub spoken: SplitSizes,
    pub text_only: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noise_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            signed: SplitSizes { train: 3000, val: 300, test: 500 },
            spoken: SplitSizes { train: 3000, val: 300, test: 500 },
            text_only: 5000,
            min_words: 3,
            max_words: 8,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config(format!(
                "corpus.min_words={} / corpus.max_words={} must satisfy 1 <= min <= max",
                self.min_words, self.max_words
            )));
        }
        if self.max_words > 36 {
            return Err(Error::Config("corpus.max_words above 36 overflows the decoder context".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("corpus.noise_sigma must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<Sample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u16,
    pub seed: u64,
    pub config: CorpusConfig,
    pub lexicon_digest: String,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl CorpusManifest {
    /// Digest over the manifest's file digests; identifies the corpus as a whole.
    pub fn corpus_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.lexicon_digest.as_bytes());
        for (k, v) in &self.files {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// In-memory corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub lexicon: Lexicon,
    pub signed: Splits,
    pub spoken: Splits,
    pub text: Vec<Sample>,
}

pub fn split_file_name(tag: CorpusTag, split: Split) -> String {
    let t = match tag {
        CorpusTag::Signed => "signed",
        CorpusTag::Spoken => "spoken",
        CorpusTag::Text => "text",
    };
    format!("{t}_{}.umsc", split.name())
}

impl Corpus {
    pub fn generate(seed: u64, config: &CorpusConfig) -> Result<Corpus> {
        config.validate()?;
        let lexicon = Lexicon::build(seed);
        let mut sentences = rng::stream(seed, "sentences", 0);
        let mut used: HashSet<Vec<u16>> = HashSet::new();
        let mut next_id = 0u32;
        let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            loop {
                let len = rng.gen_range(config.min_words..=config.max_words);
                let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..lexicon.num_words())).collect();
                // every sentence is unique across all splits and corpora
                if used.insert(s.iter().map(|w| *w as u16).collect()) {
                    return s;
                }
            }
        };
        let mut signed = Splits::default();
        let mut spoken = Splits::default();
        for (tag, sizes, splits) in [
            (CorpusTag::Signed, config.signed, &mut signed),
            (CorpusTag::Spoken, config.spoken, &mut spoken),
        ] {
            for split in Split::ALL {
                let n = match split {
                    Split::Train => sizes.train,
                    Split::Val => sizes.val,
                    Split::Test => sizes.test,
                };
                for _ in 0..n {
                    let text = draw(&mut sentences);
                    let s = render_sample_with(next_id, &text, &lexicon, tag, seed, config.noise_sigma)?;
                    splits.get_mut(split).push(s);
                    next_id += 1;
                }
            }
        }
        let mut text = Vec::with_capacity(config.text_only);
        for _ in 0..config.text_only {
            let words = draw(&mut sentences);
            text.push(Sample {
                id: next_id,
                tag: CorpusTag::Text,
                text: words.iter().map(|w| *w as u16).collect(),
                streams: vec![],
            });
            next_id += 1;
        }
        Ok(Corpus { seed, config: config.clone(), lexicon, signed, spoken, text })
    }

    pub fn splits(&self, tag: CorpusTag) -> Option<&Splits> {
        match tag {
            CorpusTag::Signed => Some(&self.signed),
            CorpusTag::Spoken => Some(&self.spoken),
            CorpusTag::Text => None,
        }
    }

    fn files(&self) -> Vec<(String, &[Sample])> {
        let mut out = Vec::new();
        for (tag, splits) in [(CorpusTag::Signed, &self.signed), (CorpusTag::Spoken, &self.spoken)] {
            for split in Split::ALL {
                out.push((split_file_name(tag, split), splits.get(split)));
            }
        }
        out.push((split_file_name(CorpusTag::Text, Split::Train), &self.text[..]));
        out
    }

    /// Writes every split plus `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<CorpusManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (name, samples) in self.files() {
            let bytes = encode_split(samples)?;
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.insert(name, sha256_hex(&bytes));
        }
        let manifest = CorpusManifest {
            format_version: super::container::VERSION,
            seed: self.seed,
            config: self.config.clone(),
            lexicon_digest: self.lexicon.digest(),
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a corpus directory, verifying every file digest and the lexicon.
    pub fn load(dir: &Path) -> Result<(Corpus, CorpusManifest)> {
        let manifest = read_manifest(dir)?;
        let lexicon = Lexicon::build(manifest.seed);
        if lexicon.digest() != manifest.lexicon_digest {
            return Err(Error::format("corpus manifest", "lexicon digest does not match seed"));
        }
        let load = |name: String| -> Result<Vec<Sample>> {
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            match manifest.files.get(&name) {
                Some(d) if *d == sha256_hex(&bytes) => decode_split(&bytes),
                Some(_) => Err(Error::format("corpus split", format!("{name} digest mismatch"))),
                None => Err(Error::format("corpus manifest", format!("{name} not listed"))),
            }
        };
        let mut signed = Splits::default();
        let mut spoken = Splits::default();
        for (tag, splits) in [(CorpusTag::Signed, &mut signed), (CorpusTag::Spoken, &mut spoken)] {
            for split in Split::ALL {
                *splits.get_mut(split) = load(split_file_name(tag, split))?;
            }
        }
        let text = load(split_file_name(CorpusTag::Text, Split::Train))?;
        let corpus = Corpus { seed: manifest.seed, config: manifest.config.clone(), lexicon, signed, spoken, text };
        Ok((corpus, manifest))
    }
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&raw)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates a corpus and writes it to `dir`.
pub fn generate_corpus(seed: u64, config: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    Corpus::generate(seed, config)?.write_to(dir)
}
