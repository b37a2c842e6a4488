//! Greedy and beam search over any incremental step model.

use crate::error::{Error, Result};

/// An autoregressive scorer: feeding `token` advances `state` and yields the
/// next-step logits.
pub trait StepModel {
    type State: Clone;

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of temperature-scaled log-probabilities of the chosen tokens (EOS included).
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { width: 5, temperature: 0.3, max_len: 12 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Argument("beam width must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Argument(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `log softmax(logits / temperature)` over the full vocabulary.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Highest-logit allowed token; ties go to the earliest entry of `allowed`.
pub fn argmax(logits: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &t in &allowed[1..] {
        if logits[t] > logits[best] {
            best = t;
        }
    }
    best
}

fn check_allowed(allowed: &[usize], vocab: usize) -> Result<()> {
    if allowed.is_empty() {
        return Err(Error::Argument("no tokens allowed".into()));
    }
    if let Some(t) = allowed.iter().find(|t| **t >= vocab) {
        return Err(Error::Argument(format!("allowed token {t} outside the {vocab}-entry logits")));
    }
    Ok(())
}

pub fn greedy<M: StepModel>(
    model: &M,
    mut state: M::State,
    mut logits: Vec<f64>,
    allowed: &[usize],
    eos: Option<usize>,
    max_len: usize,
) -> Result<Hypothesis> {
    check_allowed(allowed, logits.len())?;
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    for step in 0..max_len {
        let t = argmax(&logits, allowed);
        hyp.score += log_softmax(&logits, 1.0)[t];
        if Some(t) == eos {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(t);
        if step + 1 < max_len {
            logits = model.step(&mut state, t)?;
        }
    }
    Ok(hyp)
}

struct Live<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

/// Beam search without length normalization. Finished hypotheses keep
/// competing by raw score; the search stops once the best finished score is at
/// least every live score, since further steps can only lower live scores.
pub fn beam<M: StepModel>(
    model: &M,
    state: M::State,
    logits: Vec<f64>,
    allowed: &[usize],
    eos: Option<usize>,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    check_allowed(allowed, logits.len())?;
    let mut live = vec![Live { tokens: Vec::new(), score: 0.0, state, logits }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * allowed.len());
        for (rank, h) in live.iter().enumerate() {
            let lp = log_softmax(&h.logits, cfg.temperature);
            cands.extend(allowed.iter().map(|&t| (h.score + lp[t], rank, t)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.width);
        let last = step + 1 == cfg.max_len;
        let mut next = Vec::with_capacity(cands.len());
        for (score, rank, t) in cands {
            let parent = &live[rank];
            if Some(t) == eos {
                finished.push(Hypothesis { tokens: parent.tokens.clone(), score, finished: true });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let mut state = parent.state.clone();
            let logits = if last { Vec::new() } else { model.step(&mut state, t)? };
            next.push(Live { tokens, score, state, logits });
        }
        live = next;
        let best_live = live.first().map(|h| h.score);
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        match best_live {
            None => break,
            Some(s) if best_done >= s => break,
            _ => {}
        }
    }
    let best = finished.into_iter().reduce(|a, b| if b.score > a.score { b } else { a });
    match best {
        Some(h) => Ok(h),
        None => {
            let h = live.into_iter().next().ok_or_else(|| Error::Numeric("beam search lost every hypothesis".into()))?;
            Ok(Hypothesis { tokens: h.tokens, score: h.score, finished: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::derive_seed;

    /// Logits are a pseudo-random function of the full prefix.
    struct Toy {
        vocab: usize,
        seed: u64,
        spread: f64,
    }

    impl Toy {
        fn logits(&self, prefix: &[usize]) -> Vec<f64> {
            let mut h = self.seed;
            for t in prefix {
                h = derive_seed(h, "tok", *t as u64);
            }
            (0..self.vocab)
                .map(|i| {
                    let v = derive_seed(h, "logit", i as u64);
                    ((v >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * self.spread
                })
                .collect()
        }
    }

    impl StepModel for Toy {
        type State = Vec<usize>;

        fn step(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
            state.push(token);
            Ok(self.logits(state))
        }
    }

    fn exhaustive(toy: &Toy, len: usize, temperature: f64) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let total = toy.vocab.pow(len as u32);
        for code in 0..total {
            let seq: Vec<usize> = (0..len).map(|i| code / toy.vocab.pow(i as u32) % toy.vocab).collect();
            let mut score = 0.0;
            for i in 0..len {
                score += log_softmax(&toy.logits(&seq[..i]), temperature)[seq[i]];
            }
            if score > best.1 {
                best = (seq, score);
            }
        }
        best
    }

    fn run(toy: &Toy, width: usize, temperature: f64, eos: Option<usize>, max_len: usize) -> Hypothesis {
        let allowed: Vec<usize> = (0..toy.vocab).collect();
        let cfg = BeamConfig { width, temperature, max_len };
        beam(toy, Vec::new(), toy.logits(&[]), &allowed, eos, &cfg).unwrap()
    }

    #[test]
    fn wide_beam_finds_exhaustive_argmax() {
        for seed in 0..20 {
            let toy = Toy { vocab: 5, seed, spread: 4.0 };
            for temperature in [0.3, 1.0] {
                let (seq, score) = exhaustive(&toy, 3, temperature);
                let h = run(&toy, 125, temperature, None, 3);
                assert_eq!(h.tokens, seq);
                assert!((h.score - score).abs() < 1e-12);
                for width in [1, 2, 5, 25] {
                    assert!(run(&toy, width, temperature, None, 3).score <= score + 1e-12);
                }
            }
        }
    }

    #[test]
    fn width_one_unit_temperature_is_greedy() {
        for seed in 0..50 {
            let toy = Toy { vocab: 7, seed, spread: 6.0 };
            let allowed: Vec<usize> = (0..7).collect();
            let g = greedy(&toy, Vec::new(), toy.logits(&[]), &allowed, Some(6), 10).unwrap();
            let b = run(&toy, 1, 1.0, Some(6), 10);
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.finished, b.finished);
            assert!((g.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn argument_errors() {
        let toy = Toy { vocab: 3, seed: 0, spread: 1.0 };
        let allowed = [0, 1, 2];
        for (w, t) in [(0, 1.0), (1, 0.0), (1, -1.0), (1, f64::NAN)] {
            let cfg = BeamConfig { width: w, temperature: t, max_len: 3 };
            assert!(matches!(beam(&toy, Vec::new(), toy.logits(&[]), &allowed, None, &cfg), Err(Error::Argument(_))));
        }
        assert!(greedy(&toy, Vec::new(), toy.logits(&[]), &[], None, 3).is_err());
        assert!(greedy(&toy, Vec::new(), toy.logits(&[]), &[3], None, 3).is_err());
    }

    #[test]
    fn eos_first_gives_empty_finished_hypothesis() {
        struct Stop;
        impl StepModel for Stop {
            type State = ();
            fn step(&self, _: &mut (), _: usize) -> Result<Vec<f64>> {
                Ok(vec![0.0, 0.0, 50.0])
            }
        }
        let cfg = BeamConfig::default();
        let h = beam(&Stop, (), vec![0.0, 0.0, 50.0], &[0, 1, 2], Some(2), &cfg).unwrap();
        assert!(h.finished);
        assert!(h.tokens.is_empty());
    }

    proptest! {
        #[test]
        fn argmax_is_temperature_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..12)) {
            let allowed: Vec<usize> = (0..logits.len()).collect();
            let lp = log_softmax(&logits, 0.3);
            prop_assert_eq!(argmax(&logits, &allowed), argmax(&lp, &allowed));
            let scaled: Vec<f64> = logits.iter().map(|l| l / 0.3).collect();
            prop_assert_eq!(argmax(&logits, &allowed), argmax(&scaled, &allowed));
        }

        #[test]
        fn beam_never_beats_exhaustive(seed in 0u64..500) {
            let toy = Toy { vocab: 5, seed, spread: 5.0 };
            let (_, best) = exhaustive(&toy, 3, 0.3);
            for width in [1, 2, 5] {
                prop_assert!(run(&toy, width, 0.3, None, 3).score <= best + 1e-12);
            }
        }
    }
}
