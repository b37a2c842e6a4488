use rand::seq::index::sample;
use rand::Rng;

use super::sample::ModalityStream;
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

/// Training-time SNR grid in dB.
pub const TRAIN_SNR_DB: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
pub const BABBLE_SPEAKERS: usize = 3;

/// Sums the distractors, each trimmed or looped to the signal's frame count.
pub fn babble(frames: usize, dims: usize, distractors: &[&ModalityStream]) -> Result<Tensor2> {
    let mut noise = Tensor2::zeros(frames, dims);
    for d in distractors {
        if d.dims() != dims {
            return Err(Error::Dimension(format!("distractor has {} channels, signal {dims}", d.dims())));
        }
        if d.num_frames() == 0 {
            return Err(Error::Length("empty distractor".into()));
        }
        for t in 0..frames {
            let src = d.frames.row(t % d.num_frames());
            for (o, v) in noise.row_mut(t).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(noise)
}

/// Noise gain giving the requested SNR: `sqrt(P_signal / (P_noise · 10^(snr/10)))`.
pub fn snr_gain(p_signal: f64, p_noise: f64, snr_db: f64) -> Result<f64> {
    if p_signal <= 0.0 {
        return Err(Error::Numeric("signal has zero power".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Numeric("noise has zero power".into()));
    }
    Ok((p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

fn power(t: &Tensor2) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        t.sum_squares() / t.len() as f64
    }
}

/// Mixes babble (summed distractor utterances) into `audio` at `snr_db`.
pub fn mix_babble(audio: &ModalityStream, distractors: &[&ModalityStream], snr_db: f64) -> Result<ModalityStream> {
    let noise = babble(audio.num_frames(), audio.dims(), distractors)?;
    let alpha = snr_gain(audio.power(), power(&noise), snr_db)?;
    let mut frames = audio.frames.clone();
    frames.axpy(alpha, &noise);
    Ok(ModalityStream { modality: audio.modality, frame_rate: audio.frame_rate, frames })
}

/// Removes `floor(fraction · |text|)` words chosen uniformly, preserving order.
pub fn word_drop_with_fraction<T: Clone, R: Rng>(text: &[T], fraction: f64, rng: &mut R) -> Vec<T> {
    let n = text.len();
    let k = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    if k == 0 {
        return text.to_vec();
    }
    let mut drop = vec![false; n];
    for i in sample(rng, n, k) {
        drop[i] = true;
    }
    text.iter().zip(drop).filter(|(_, d)| !d).map(|(w, _)| w.clone()).collect()
}

/// Drops a uniformly drawn 0–20% of the words.
pub fn word_drop_augment<T: Clone, R: Rng>(text: &[T], rng: &mut R) -> Vec<T> {
    let f = rng.gen_range(0.0..=0.2);
    word_drop_with_fraction(text, f, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthcorpus::Modality;

    fn stream(rows: usize, value: f64) -> ModalityStream {
        ModalityStream::new(Modality::Audio, Tensor2::filled(rows, 12, value))
    }

    #[test]
    fn zero_db_equalizes_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig = ModalityStream::new(Modality::Audio, Tensor2::randn(64, 12, 1.0, &mut rng));
        let d: Vec<_> = (0..3).map(|_| ModalityStream::new(Modality::Audio, Tensor2::randn(40, 12, 0.7, &mut rng))).collect();
        let refs: Vec<&ModalityStream> = d.iter().collect();
        let mixed = mix_babble(&sig, &refs, 0.0).unwrap();
        let mut added = mixed.frames.clone();
        added.axpy(-1.0, &sig.frames);
        let ratio = power(&added) / sig.power();
        assert!((ratio - 1.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn gain_closed_form() {
        let a = snr_gain(4.0, 1.0, 10.0).unwrap();
        assert!((a - 0.4f64.sqrt()).abs() < 1e-15);
        assert!((a - 0.63246).abs() < 1e-5);
    }

    #[test]
    fn very_high_snr_is_transparent() {
        let sig = stream(32, 0.5);
        let d = [stream(32, 1.0), stream(16, -2.0), stream(50, 0.3)];
        let refs: Vec<&ModalityStream> = d.iter().collect();
        let mixed = mix_babble(&sig, &refs, 200.0).unwrap();
        assert!(mixed.frames.max_abs_diff(&sig.frames) < 1e-6);
    }

    #[test]
    fn zero_power_is_an_error() {
        let d = [stream(8, 1.0)];
        let refs: Vec<&ModalityStream> = d.iter().collect();
        assert!(mix_babble(&stream(8, 0.0), &refs, 0.0).is_err());
        let silent = [stream(8, 0.0)];
        let refs: Vec<&ModalityStream> = silent.iter().collect();
        assert!(mix_babble(&stream(8, 1.0), &refs, 0.0).is_err());
    }

    #[test]
    fn word_drop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text: Vec<u32> = (0..10).collect();
        assert_eq!(word_drop_with_fraction(&text, 0.0, &mut rng), text);
        let kept = word_drop_with_fraction(&text, 0.2, &mut rng);
        assert_eq!(kept.len(), 8);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let short = [7u32, 8, 9];
        for f in [0.0, 0.1, 0.2, 0.33] {
            assert_eq!(word_drop_with_fraction(&short, f, &mut rng), short);
        }
        for _ in 0..200 {
            let out = word_drop_augment(&text, &mut rng);
            assert!(out.len() >= 8 && out.len() <= 10);
        }
    }
}
