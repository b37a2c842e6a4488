use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor2;
use crate::rng;

pub const NUM_WORDS: usize = 40;
pub const NUM_PHONEMES: usize = 20;
pub const NUM_VISEMES: usize = 8;
pub const NUM_MERGED_PAIRS: usize = 10;
pub const NUM_GLOSSES: usize = NUM_WORDS - NUM_MERGED_PAIRS;
/// Word pairs forced to share every viseme.
pub const MIN_HOMOPHENE_PAIRS: usize = 4;

pub const SIGN_DIMS: usize = 8;
pub const LIP_DIMS: usize = 8;
pub const AUDIO_DIMS: usize = 12;

/// Viseme class of a phoneme: `floor(j · 8 / 20)`.
pub fn viseme_of(phoneme: usize) -> usize {
    phoneme * NUM_VISEMES / NUM_PHONEMES
}

fn phonemes_of_viseme(v: usize) -> Vec<usize> {
    (0..NUM_PHONEMES).filter(|p| viseme_of(*p) == v).collect()
}

/// The synthetic language: words, their phoneme spellings, gloss merging and
/// per-symbol unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    seed: u64,
    phonemes: Vec<Vec<usize>>,
    gloss_of: Vec<usize>,
    merged_pairs: Vec<(usize, usize)>,
    homophene_pairs: Vec<(usize, usize)>,
    gloss_emb: Tensor2,
    viseme_emb: Tensor2,
    lip_silence: Tensor2,
    phoneme_emb: Tensor2,
    audio_silence: Tensor2,
}

fn unit_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let mut t = Tensor2::randn(rows, cols, 1.0, rng);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row {
            *v /= n;
        }
    }
    t
}

impl Lexicon {
    pub fn build(seed: u64) -> Lexicon {
        let mut rng = rng::stream(seed, "lexicon", 0);

        // Homophene pairs first: partner spells the same visemes with at least one
        // phoneme swapped inside its viseme class.
        let mut order: Vec<usize> = (0..NUM_WORDS).collect();
        order.shuffle(&mut rng);
        let mut phonemes: Vec<Option<Vec<usize>>> = vec![None; NUM_WORDS];
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let random_spelling = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            let len = rng.gen_range(2..=4);
            (0..len).map(|_| rng.gen_range(0..NUM_PHONEMES)).collect()
        };
        let mut homophene_pairs = Vec::new();
        for k in 0..MIN_HOMOPHENE_PAIRS {
            let (a, b) = (order[2 * k], order[2 * k + 1]);
            loop {
                let base = random_spelling(&mut rng);
                let mut partner = base.clone();
                let pos = rng.gen_range(0..partner.len());
                let alternatives: Vec<usize> =
                    phonemes_of_viseme(viseme_of(base[pos])).into_iter().filter(|p| *p != base[pos]).collect();
                partner[pos] = *alternatives.choose(&mut rng).expect("every viseme has two phonemes");
                for (i, p) in partner.iter_mut().enumerate() {
                    if i != pos && rng.gen_bool(0.5) {
                        *p = *phonemes_of_viseme(viseme_of(*p)).choose(&mut rng).expect("non-empty");
                    }
                }
                if !seen.contains(&base) && !seen.contains(&partner) && base != partner {
                    seen.insert(base.clone());
                    seen.insert(partner.clone());
                    phonemes[a] = Some(base);
                    phonemes[b] = Some(partner);
                    homophene_pairs.push((a.min(b), a.max(b)));
                    break;
                }
            }
        }
        for slot in phonemes.iter_mut().filter(|s| s.is_none()) {
            loop {
                let s = random_spelling(&mut rng);
                if seen.insert(s.clone()) {
                    *slot = Some(s);
                    break;
                }
            }
        }
        let phonemes: Vec<Vec<usize>> = phonemes.into_iter().map(|p| p.expect("filled")).collect();
        let visemes: Vec<Vec<usize>> =
            phonemes.iter().map(|p| p.iter().map(|j| viseme_of(*j)).collect()).collect();

        // Gloss-merged pairs must remain separable on the lips.
        let merged_pairs = loop {
            let mut words: Vec<usize> = (0..NUM_WORDS).collect();
            words.shuffle(&mut rng);
            let pairs: Vec<(usize, usize)> = (0..NUM_MERGED_PAIRS)
                .map(|k| {
                    let (a, b) = (words[2 * k], words[2 * k + 1]);
                    (a.min(b), a.max(b))
                })
                .collect();
            if pairs.iter().all(|(a, b)| visemes[*a] != visemes[*b]) {
                let mut pairs = pairs;
                pairs.sort_unstable();
                break pairs;
            }
        };
        let mut gloss_of = vec![usize::MAX; NUM_WORDS];
        let mut next = 0;
        for w in 0..NUM_WORDS {
            if gloss_of[w] != usize::MAX {
                continue;
            }
            gloss_of[w] = next;
            if let Some(&(a, b)) = merged_pairs.iter().find(|(a, b)| *a == w || *b == w) {
                gloss_of[if a == w { b } else { a }] = next;
            }
            next += 1;
        }
        debug_assert_eq!(next, NUM_GLOSSES);

        let mut homophene_pairs = homophene_pairs;
        for a in 0..NUM_WORDS {
            for b in a + 1..NUM_WORDS {
                if visemes[a] == visemes[b] && !homophene_pairs.contains(&(a, b)) {
                    homophene_pairs.push((a, b));
                }
            }
        }
        homophene_pairs.sort_unstable();

        let gloss_emb = unit_rows(NUM_GLOSSES, SIGN_DIMS, &mut rng);
        let viseme_emb = unit_rows(NUM_VISEMES, LIP_DIMS, &mut rng);
        let lip_silence = unit_rows(1, LIP_DIMS, &mut rng);
        let phoneme_emb = unit_rows(NUM_PHONEMES, AUDIO_DIMS, &mut rng);
        let audio_silence = unit_rows(1, AUDIO_DIMS, &mut rng);

        Lexicon {
            seed,
            phonemes,
            gloss_of,
            merged_pairs,
            homophene_pairs,
            gloss_emb,
            viseme_emb,
            lip_silence,
            phoneme_emb,
            audio_silence,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_words(&self) -> usize {
        self.phonemes.len()
    }

    pub fn word_name(w: usize) -> String {
        format!("w{w}")
    }

    pub fn phonemes(&self, word: usize) -> &[usize] {
        &self.phonemes[word]
    }

    pub fn visemes(&self, word: usize) -> Vec<usize> {
        self.phonemes[word].iter().map(|p| viseme_of(*p)).collect()
    }

    pub fn gloss_of(&self, word: usize) -> usize {
        self.gloss_of[word]
    }

    pub fn num_glosses(&self) -> usize {
        self.gloss_of.iter().max().map_or(0, |m| m + 1)
    }

    pub fn merged_pairs(&self) -> &[(usize, usize)] {
        &self.merged_pairs
    }

    /// The other word sharing this word's gloss, if any.
    pub fn gloss_partner(&self, word: usize) -> Option<usize> {
        self.merged_pairs.iter().find_map(|&(a, b)| {
            if a == word {
                Some(b)
            } else if b == word {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Word pairs whose viseme spellings coincide.
    pub fn homophene_pairs(&self) -> &[(usize, usize)] {
        &self.homophene_pairs
    }

    pub fn gloss_embedding(&self, gloss: usize) -> &[f64] {
        self.gloss_emb.row(gloss)
    }

    pub fn viseme_embedding(&self, viseme: usize) -> &[f64] {
        self.viseme_emb.row(viseme)
    }

    pub fn lip_silence(&self) -> &[f64] {
        self.lip_silence.row(0)
    }

    pub fn phoneme_embedding(&self, phoneme: usize) -> &[f64] {
        self.phoneme_emb.row(phoneme)
    }

    pub fn audio_silence(&self) -> &[f64] {
        self.audio_silence.row(0)
    }

    /// SHA-256 over every field that determines rendering.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in &self.phonemes {
            h.update((p.len() as u32).to_le_bytes());
            for j in p {
                h.update((*j as u32).to_le_bytes());
            }
        }
        for g in &self.gloss_of {
            h.update((*g as u32).to_le_bytes());
        }
        for t in [&self.gloss_emb, &self.viseme_emb, &self.lip_silence, &self.phoneme_emb, &self.audio_silence] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(Lexicon::build(11), Lexicon::build(11));
        assert_ne!(Lexicon::build(11).digest(), Lexicon::build(12).digest());
    }

    #[test]
    fn structure_invariants() {
        for seed in 0..20 {
            let lex = Lexicon::build(seed);
            assert_eq!(lex.num_words(), 40);
            assert_eq!(lex.num_glosses(), 30);
            assert_eq!(lex.merged_pairs().len(), 10);
            let spellings: HashSet<_> = (0..40).map(|w| lex.phonemes(w).to_vec()).collect();
            assert_eq!(spellings.len(), 40, "audio must separate every word");
            for w in 0..40 {
                assert!((2..=4).contains(&lex.phonemes(w).len()));
            }
            for &(a, b) in lex.merged_pairs() {
                assert_eq!(lex.gloss_of(a), lex.gloss_of(b));
                assert_ne!(lex.visemes(a), lex.visemes(b));
            }
            assert!(lex.homophene_pairs().len() >= MIN_HOMOPHENE_PAIRS);
            for &(a, b) in lex.homophene_pairs() {
                assert_eq!(lex.visemes(a), lex.visemes(b));
                assert_ne!(lex.phonemes(a), lex.phonemes(b));
            }
        }
    }

    #[test]
    fn viseme_map_is_many_to_one() {
        let mut counts = [0usize; NUM_VISEMES];
        for j in 0..NUM_PHONEMES {
            counts[viseme_of(j)] += 1;
        }
        assert!(counts.iter().all(|c| *c >= 2));
        assert!(counts.iter().any(|c| *c >= 3));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let lex = Lexicon::build(5);
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for g in 0..NUM_GLOSSES {
            assert!((norm(lex.gloss_embedding(g)) - 1.0).abs() < 1e-12);
        }
        for v in 0..NUM_VISEMES {
            assert!((norm(lex.viseme_embedding(v)) - 1.0).abs() < 1e-12);
        }
        for p in 0..NUM_PHONEMES {
            assert!((norm(lex.phoneme_embedding(p)) - 1.0).abs() < 1e-12);
        }
        assert!((norm(lex.lip_silence()) - 1.0).abs() < 1e-12);
    }
}
