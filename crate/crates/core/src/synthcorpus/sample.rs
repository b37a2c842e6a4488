use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lexicon::{Lexicon, AUDIO_DIMS, LIP_DIMS, SIGN_DIMS};
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::rng;

pub const SIGN_FRAMES_PER_WORD: usize = 8;
pub const LIP_FRAMES_PER_WORD: usize = 8;
pub const AUDIO_FRAMES_PER_WORD: usize = 32;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sign,
    Lip,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Sign, Modality::Lip, Modality::Audio];

    pub fn code(self) -> u8 {
        match self {
            Modality::Sign => 0,
            Modality::Lip => 1,
            Modality::Audio => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Modality> {
        match c {
            0 => Some(Modality::Sign),
            1 => Some(Modality::Lip),
            2 => Some(Modality::Audio),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Sign => "sign",
            Modality::Lip => "lip",
            Modality::Audio => "audio",
        }
    }

    /// Raw frames per unit time.
    pub fn frame_rate(self) -> u16 {
        match self {
            Modality::Sign | Modality::Lip => 25,
            Modality::Audio => 100,
        }
    }

    pub fn dims(self) -> usize {
        match self {
            Modality::Sign => SIGN_DIMS,
            Modality::Lip => LIP_DIMS,
            Modality::Audio => AUDIO_DIMS,
        }
    }

    pub fn frames_per_word(self) -> usize {
        match self {
            Modality::Sign => SIGN_FRAMES_PER_WORD,
            Modality::Lip => LIP_FRAMES_PER_WORD,
            Modality::Audio => AUDIO_FRAMES_PER_WORD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusTag {
    /// Sign + lip streams.
    Signed,
    /// Lip + audio streams.
    Spoken,
    /// Text only, no streams.
    Text,
}

impl CorpusTag {
    pub fn code(self) -> u8 {
        match self {
            CorpusTag::Signed => 0,
            CorpusTag::Spoken => 1,
            CorpusTag::Text => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<CorpusTag> {
        match c {
            0 => Some(CorpusTag::Signed),
            1 => Some(CorpusTag::Spoken),
            2 => Some(CorpusTag::Text),
            _ => None,
        }
    }

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            CorpusTag::Signed => &[Modality::Sign, Modality::Lip],
            CorpusTag::Spoken => &[Modality::Lip, Modality::Audio],
            CorpusTag::Text => &[],
        }
    }
}

/// One raw per-modality frame sequence (frames × channels).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    pub frame_rate: u16,
    pub frames: Tensor2,
}

impl ModalityStream {
    pub fn new(modality: Modality, frames: Tensor2) -> Self {
        Self { modality, frame_rate: modality.frame_rate(), frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dims(&self) -> usize {
        self.frames.cols()
    }

    /// Wall-time duration in rate units.
    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / f64::from(self.frame_rate)
    }

    /// Mean squared frame value.
    pub fn power(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.sum_squares() / self.frames.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub tag: CorpusTag,
    pub text: Vec<u16>,
    pub streams: Vec<ModalityStream>,
}

impl Sample {
    pub fn stream(&self, m: Modality) -> Option<&ModalityStream> {
        self.streams.iter().find(|s| s.modality == m)
    }

    pub fn stream_mut(&mut self, m: Modality) -> Option<&mut ModalityStream> {
        self.streams.iter_mut().find(|s| s.modality == m)
    }

    pub fn words(&self) -> Vec<usize> {
        self.text.iter().map(|w| usize::from(*w)).collect()
    }
}

fn quantize(t: &mut Tensor2) {
    // streams are persisted as f32; keep the in-memory copy identical
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

fn add_noise<R: Rng>(t: &mut Tensor2, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in t.data_mut() {
        *v += normal.sample(rng);
    }
}

/// Fills `frames` rows with the symbols tiled evenly; leftover rows get `silence`.
fn tile(out: &mut Tensor2, start: usize, frames: usize, symbols: &[&[f64]], silence: &[f64]) {
    let per = frames / symbols.len();
    for f in 0..frames {
        let k = f / per;
        let src = if k < symbols.len() { symbols[k] } else { silence };
        out.row_mut(start + f).copy_from_slice(src);
    }
}

pub fn render_stream(modality: Modality, text: &[usize], lex: &Lexicon) -> Tensor2 {
    let per = modality.frames_per_word();
    let mut out = Tensor2::zeros(per * text.len(), modality.dims());
    for (i, &w) in text.iter().enumerate() {
        let start = i * per;
        match modality {
            Modality::Sign => {
                let g = lex.gloss_embedding(lex.gloss_of(w));
                for f in 0..per {
                    out.row_mut(start + f).copy_from_slice(g);
                }
            }
            Modality::Lip => {
                let vis = lex.visemes(w);
                let rows: Vec<&[f64]> = vis.iter().map(|v| lex.viseme_embedding(*v)).collect();
                tile(&mut out, start, per, &rows, lex.lip_silence());
            }
            Modality::Audio => {
                let rows: Vec<&[f64]> = lex.phonemes(w).iter().map(|p| lex.phoneme_embedding(*p)).collect();
                tile(&mut out, start, per, &rows, lex.audio_silence());
            }
        }
    }
    out
}

/// Renders a sentence into the streams its corpus carries, with Gaussian
/// observation noise of standard deviation `sigma`.
pub fn render_sample_with(
    id: u32,
    text: &[usize],
    lex: &Lexicon,
    tag: CorpusTag,
    seed: u64,
    sigma: f64,
) -> Result<Sample> {
    if text.is_empty() {
        return Err(Error::Argument("cannot render an empty sentence".into()));
    }
    if let Some(w) = text.iter().find(|w| **w >= lex.num_words()) {
        return Err(Error::Lexicon(format!("unknown word index {w}")));
    }
    if text.len() > u16::MAX as usize {
        return Err(Error::Argument("sentence too long".into()));
    }
    let mut rng = rng::stream(seed, "render", u64::from(id));
    let mut streams = Vec::new();
    for &m in tag.modalities() {
        let mut frames = render_stream(m, text, lex);
        add_noise(&mut frames, sigma, &mut rng);
        quantize(&mut frames);
        streams.push(ModalityStream::new(m, frames));
    }
    Ok(Sample { id, tag, text: text.iter().map(|w| *w as u16).collect(), streams })
}

pub fn render_sample(id: u32, text: &[usize], lex: &Lexicon, tag: CorpusTag, seed: u64) -> Result<Sample> {
    render_sample_with(id, text, lex, tag, seed, DEFAULT_NOISE_SIGMA)
}
