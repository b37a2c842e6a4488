//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGrads, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Absolute error below which a coordinate passes regardless of relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, abs_floor: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error among coordinates whose absolute error exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Identifier of the coordinate with the largest error.
    pub worst_param: String,
    pub passed: bool,
    pub checked: usize,
}

impl GradReport {
    fn empty() -> Self {
        Self { max_rel_err: 0.0, max_abs_err: 0.0, worst_param: String::new(), passed: true, checked: 0 }
    }

    fn fail_non_finite(name: String, checked: usize) -> Self {
        Self { max_rel_err: f64::INFINITY, max_abs_err: f64::INFINITY, worst_param: name, passed: false, checked }
    }

    /// Folds another report into this one (worst case wins).
    pub fn merge(&mut self, other: GradReport) {
        if other.max_abs_err > self.max_abs_err || (!other.passed && self.passed) {
            self.worst_param = other.worst_param.clone();
        }
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.passed &= other.passed;
        self.checked += other.checked;
    }
}

struct Tracker {
    cfg: GradCheckConfig,
    report: GradReport,
    worst_score: f64,
}

impl Tracker {
    fn new(cfg: GradCheckConfig) -> Self {
        Self { cfg, report: GradReport::empty(), worst_score: -1.0 }
    }

    fn observe(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        self.report.checked += 1;
        self.report.max_abs_err = self.report.max_abs_err.max(abs);
        let over_floor = abs > self.cfg.abs_floor;
        if over_floor {
            self.report.max_rel_err = self.report.max_rel_err.max(rel);
        }
        let score = if over_floor { rel } else { 0.0 } + abs * 1e-12;
        if score > self.worst_score {
            self.worst_score = score;
            self.report.worst_param = name();
        }
    }

    fn finish(mut self) -> GradReport {
        self.report.passed = self.report.max_rel_err <= self.cfg.tol;
        self.report
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// `name(i)` labels coordinate `i` in the report.
pub fn grad_check<F, N>(mut loss: F, params: &[f64], analytic: &[f64], name: N, cfg: GradCheckConfig) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
    N: Fn(usize) -> String,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut tracker = Tracker::new(cfg);
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + cfg.eps;
        let plus = loss(&p);
        p[i] = orig - cfg.eps;
        let minus = loss(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return GradReport::fail_non_finite(name(i), tracker.report.checked);
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        tracker.observe(|| name(i), analytic[i], numeric);
    }
    tracker.finish()
}

/// Gradient check over a [`ParamStore`].
///
/// `loss_and_grads` evaluates the loss and its analytic gradients; `loss_only`
/// evaluates the loss alone. At most `per_param` randomly chosen coordinates of
/// each tensor are probed (`None` probes all).
pub fn check_store<L, F>(
    store: &ParamStore,
    loss_and_grads: L,
    mut loss_only: F,
    per_param: Option<usize>,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradReport>
where
    L: FnOnce(&ParamStore) -> Result<(f64, ParamGrads)>,
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let (base, grads) = loss_and_grads(store)?;
    if !base.is_finite() {
        return Ok(GradReport::fail_non_finite("<base loss>".into(), 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut tracker = Tracker::new(cfg);
    for (id, param) in store.iter() {
        let n = param.value.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = param.value.data()[c];
            work.value_mut(id).data_mut()[c] = orig + cfg.eps;
            let plus = loss_only(&work)?;
            work.value_mut(id).data_mut()[c] = orig - cfg.eps;
            let minus = loss_only(&work)?;
            work.value_mut(id).data_mut()[c] = orig;
            let label = || format!("{}[{c}]", param.name);
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(GradReport::fail_non_finite(label(), tracker.report.checked));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            tracker.observe(label, analytic, numeric);
        }
    }
    Ok(tracker.finish())
}
