use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup, constant hold, linear decay to `floor_ratio · peak`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriStage {
    pub warmup: usize,
    pub hold: usize,
    pub decay: usize,
    pub peak: f64,
    pub floor_ratio: f64,
}

impl TriStage {
    pub fn steps(&self) -> usize {
        self.warmup + self.hold + self.decay
    }

    pub fn floor(&self) -> f64 {
        self.peak * self.floor_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps() == 0 {
            return Err(Error::Config("schedule has zero steps".into()));
        }
        if !(self.peak.is_finite() && self.peak >= 0.0) {
            return Err(Error::Config(format!("peak learning rate {} is invalid", self.peak)));
        }
        if !(0.0..=1.0).contains(&self.floor_ratio) {
            return Err(Error::Config(format!("floor_ratio {} must lie in [0, 1]", self.floor_ratio)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.steps() {
            return Err(Error::Argument(format!("step {step} outside a {}-step schedule", self.steps())));
        }
        if step + 1 == self.warmup {
            return Ok(self.peak);
        }
        if step < self.warmup {
            return Ok(self.peak * (step + 1) as f64 / self.warmup as f64);
        }
        let s = step - self.warmup;
        if s < self.hold {
            return Ok(self.peak);
        }
        let frac = (s - self.hold + 1) as f64 / self.decay as f64;
        Ok(self.peak + (self.floor() - self.peak) * frac)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn stage1() -> TriStage {
        TriStage { warmup: 300, hold: 300, decay: 1800, peak: 1e-3, floor_ratio: 0.01 }
    }

    #[test]
    fn examples() {
        let s = stage1();
        assert_eq!(s.lr_at(149).unwrap(), 0.5e-3);
        assert_eq!(s.lr_at(299).unwrap(), 1e-3);
        for step in 300..600 {
            assert_eq!(s.lr_at(step).unwrap(), 1e-3);
        }
        assert!((s.lr_at(2399).unwrap() - 1e-5).abs() < 1e-18);
        assert!(s.lr_at(2400).is_err());
    }

    #[test]
    fn no_hold_stage() {
        let s = TriStage { warmup: 50, hold: 0, decay: 1950, peak: 1e-3, floor_ratio: 0.01 };
        assert_eq!(s.lr_at(49).unwrap(), 1e-3);
        assert!(s.lr_at(50).unwrap() < 1e-3);
        assert!((s.lr_at(1999).unwrap() - 1e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn bounded_and_shaped(w in 1usize..50, h in 0usize..50, d in 1usize..80, peak in 1e-5f64..1e-1) {
            let s = TriStage { warmup: w, hold: h, decay: d, peak, floor_ratio: 0.01 };
            let lrs: Vec<f64> = (0..s.steps()).map(|i| s.lr_at(i).unwrap()).collect();
            prop_assert!(lrs.iter().all(|l| *l > 0.0 && *l <= peak));
            prop_assert!(lrs[..w].windows(2).all(|p| p[0] < p[1]));
            prop_assert!(lrs[w + h..].windows(2).all(|p| p[0] > p[1]));
            prop_assert_eq!(lrs[w - 1], peak);
            // boundary continuity: the step into decay moves by exactly one decrement
            let dec = (peak - s.floor()) / d as f64;
            let first_decay = lrs[w + h];
            prop_assert!((peak - first_decay - dec).abs() <= 4.0 * f64::EPSILON * peak);
        }
    }
}
