//! Length adapters, task-adaptive zero-mask concatenation and the shared
//! mapping network that produces the unified linguistic tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{affine, Graph, ParamId, ParamStore, Tensor2, Var};
use crate::encoders::{EncoderConfig, FrameFeatures};
use crate::error::{Error, Result};
use crate::synthcorpus::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Slt,
    Vsr,
    Asr,
    Avsr,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Slt, TaskKind::Vsr, TaskKind::Asr, TaskKind::Avsr];
    pub const SPEECH: [TaskKind; 3] = [TaskKind::Vsr, TaskKind::Asr, TaskKind::Avsr];

    /// Which feature blocks survive: SLT=(s,v,0), VSR=(0,v,0), ASR=(0,0,a), AVSR=(0,v,a).
    pub fn mask(self) -> ModalityMask {
        match self {
            TaskKind::Slt => ModalityMask { sign: true, lip: true, audio: false },
            TaskKind::Vsr => ModalityMask { sign: false, lip: true, audio: false },
            TaskKind::Asr => ModalityMask { sign: false, lip: false, audio: true },
            TaskKind::Avsr => ModalityMask { sign: false, lip: true, audio: true },
        }
    }

    pub fn index(self) -> usize {
        match self {
            TaskKind::Slt => 0,
            TaskKind::Vsr => 1,
            TaskKind::Asr => 2,
            TaskKind::Avsr => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Slt => "SLT",
            TaskKind::Vsr => "VSR",
            TaskKind::Asr => "ASR",
            TaskKind::Avsr => "AVSR",
        }
    }

    pub fn is_speech(self) -> bool {
        self != TaskKind::Slt
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slt" => Ok(TaskKind::Slt),
            "vsr" => Ok(TaskKind::Vsr),
            "asr" => Ok(TaskKind::Asr),
            "avsr" => Ok(TaskKind::Avsr),
            other => Err(Error::Argument(format!("unknown task '{other}' (expected slt, vsr, asr or avsr)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub sign: bool,
    pub lip: bool,
    pub audio: bool,
}

impl ModalityMask {
    pub fn keeps(&self, m: Modality) -> bool {
        match m {
            Modality::Sign => self.sign,
            Modality::Lip => self.lip,
            Modality::Audio => self.audio,
        }
    }

    pub fn kept(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.keeps(*m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Adapter kernel = stride per modality.
    pub sign_stride: usize,
    pub lip_stride: usize,
    pub audio_stride: usize,
    /// Mapping hidden width; `None` uses the mean of input and output widths.
    pub hidden: Option<usize>,
    /// Output width; must equal the decoder width.
    pub d_llm: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { sign_stride: 2, lip_stride: 2, audio_stride: 4, hidden: None, d_llm: 64 }
    }
}

impl FusionConfig {
    pub fn stride(&self, m: Modality) -> usize {
        match m {
            Modality::Sign => self.sign_stride,
            Modality::Lip => self.lip_stride,
            Modality::Audio => self.audio_stride,
        }
    }

    pub fn hidden_dims(&self, enc: &EncoderConfig) -> usize {
        self.hidden.unwrap_or((concat_dims(enc) + self.d_llm) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            if self.stride(m) == 0 {
                return Err(Error::Config(format!("fusion.{}_stride must be >= 1", m.name())));
            }
        }
        if self.d_llm == 0 || self.hidden == Some(0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn concat_dims(enc: &EncoderConfig) -> usize {
    enc.sign_dims + enc.lip_dims + enc.audio_dims
}

/// Dimension-preserving strided convolution with kernel = stride.
#[derive(Clone, Copy, Debug)]
pub struct LengthAdapter {
    pub modality: Modality,
    pub stride: usize,
    w: ParamId,
    b: ParamId,
}

impl LengthAdapter {
    pub fn register<R: Rng>(store: &mut ParamStore, modality: Modality, dims: usize, stride: usize, rng: &mut R) -> Self {
        let name = format!("adapt.{}", modality.name());
        let std = 1.0 / ((stride * dims) as f64).sqrt();
        let w = store.insert(format!("{name}.w"), Tensor2::randn(stride * dims, dims, std, rng), true);
        let b = store.insert(format!("{name}.b"), Tensor2::zeros(1, dims), true);
        LengthAdapter { modality, stride, w, b }
    }

    pub fn bind(store: &ParamStore, modality: Modality, stride: usize) -> Result<Self> {
        let name = format!("adapt.{}", modality.name());
        Ok(LengthAdapter {
            modality,
            stride,
            w: store.expect_id(&format!("{name}.w"))?,
            b: store.expect_id(&format!("{name}.b"))?,
        })
    }

    pub fn output_len(&self, t: usize) -> Option<usize> {
        (t >= self.stride).then(|| (t - self.stride) / self.stride + 1)
    }

    pub fn adapt(&self, g: &mut Graph<'_>, f: &FrameFeatures) -> Result<Var> {
        if f.modality != self.modality {
            return Err(Error::Modality(format!(
                "{} adapter received {} features",
                self.modality.name(),
                f.modality.name()
            )));
        }
        let t = g.shape(f.values).0;
        if t < self.stride {
            return Err(Error::Length(format!(
                "{} features have {t} frames, adapter kernel is {}",
                self.modality.name(),
                self.stride
            )));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(f.values, w, b, self.stride, self.stride)
    }
}

/// Per-modality adapter outputs `F̃_m`, all at the shared resolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlignedFeatures {
    pub sign: Option<Var>,
    pub lip: Option<Var>,
    pub audio: Option<Var>,
}

impl AlignedFeatures {
    pub fn get(&self, m: Modality) -> Option<Var> {
        match m {
            Modality::Sign => self.sign,
            Modality::Lip => self.lip,
            Modality::Audio => self.audio,
        }
    }

    pub fn set(&mut self, m: Modality, v: Var) {
        match m {
            Modality::Sign => self.sign = Some(v),
            Modality::Lip => self.lip = Some(v),
            Modality::Audio => self.audio = Some(v),
        }
    }

    /// Trims every present block to the shortest length, warning when that changes anything.
    pub fn trim_to_common(&mut self, g: &mut Graph<'_>) -> Result<usize> {
        let lens: Vec<usize> = Modality::ALL.iter().filter_map(|m| self.get(*m)).map(|v| g.shape(v).0).collect();
        let Some(&min) = lens.iter().min() else {
            return Err(Error::TaskMismatch("no modality features present".into()));
        };
        if lens.iter().any(|l| *l != min) {
            log::warn!("aligned lengths disagree ({lens:?}); trimming to {min}");
            for m in Modality::ALL {
                if let Some(v) = self.get(m) {
                    if g.shape(v).0 != min {
                        let t = g.slice_rows(v, 0, min)?;
                        self.set(m, t);
                    }
                }
            }
        }
        Ok(min)
    }
}

/// Concatenates the aligned blocks in (sign, lip, audio) order, substituting
/// exact zeros for every block the mask drops.
pub fn fuse(g: &mut Graph<'_>, aligned: &AlignedFeatures, mask: ModalityMask, enc: &EncoderConfig) -> Result<Var> {
    let mut t = None;
    for m in mask.kept() {
        let v = aligned.get(m).ok_or_else(|| {
            Error::TaskMismatch(format!("mask requires {} features but none were provided", m.name()))
        })?;
        let rows = g.shape(v).0;
        match t {
            None => t = Some(rows),
            Some(t0) if t0 != rows => {
                return Err(Error::Alignment(format!("{} features have {rows} steps, expected {t0}", m.name())))
            }
            _ => {}
        }
        if g.shape(v).1 != enc.out_dims(m) {
            return Err(Error::Dimension(format!("{} features must have {} channels", m.name(), enc.out_dims(m))));
        }
    }
    let t = t.ok_or_else(|| Error::TaskMismatch("mask keeps no modality".into()))?;
    let mut parts = Vec::with_capacity(3);
    for m in Modality::ALL {
        let block = match (mask.keeps(m), aligned.get(m)) {
            (true, Some(v)) => v,
            _ => g.zeros(t, enc.out_dims(m)),
        };
        parts.push(block);
    }
    g.concat_cols(&parts)
}

/// Two affine layers with one nonlinearity, shared across every task.
#[derive(Clone, Copy, Debug)]
pub struct MappingNetwork {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    in_dims: usize,
}

impl MappingNetwork {
    pub fn register<R: Rng>(store: &mut ParamStore, in_dims: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let w1 = store.insert("map.l1.w", Tensor2::randn(in_dims, hidden, 1.0 / (in_dims as f64).sqrt(), rng), true);
        let b1 = store.insert("map.l1.b", Tensor2::zeros(1, hidden), true);
        let w2 = store.insert("map.l2.w", Tensor2::randn(hidden, out, 1.0 / (hidden as f64).sqrt(), rng), true);
        let b2 = store.insert("map.l2.b", Tensor2::zeros(1, out), true);
        MappingNetwork { w1, b1, w2, b2, in_dims }
    }

    pub fn bind(store: &ParamStore, in_dims: usize) -> Result<Self> {
        Ok(MappingNetwork {
            w1: store.expect_id("map.l1.w")?,
            b1: store.expect_id("map.l1.b")?,
            w2: store.expect_id("map.l2.w")?,
            b2: store.expect_id("map.l2.b")?,
            in_dims,
        })
    }

    /// `U = Map(F̃_concat)`.
    pub fn map_tokens(&self, g: &mut Graph<'_>, fused: Var) -> Result<Var> {
        if g.shape(fused).1 != self.in_dims {
            return Err(Error::Dimension(format!(
                "mapping network expects {} channels, got {}",
                self.in_dims,
                g.shape(fused).1
            )));
        }
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = affine(g, fused, w1, b1)?;
        let h = g.gelu(h);
        affine(g, h, w2, b2)
    }
}

/// Mapped tokens with the task that produced their mask pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct LinguisticTokens {
    pub values: Tensor2,
    pub task: TaskKind,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::{check_store, GradCheckConfig, GradMode};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn masks_follow_the_four_patterns() {
        let m = |s, v, a| ModalityMask { sign: s, lip: v, audio: a };
        assert_eq!(TaskKind::Slt.mask(), m(true, true, false));
        assert_eq!(TaskKind::Vsr.mask(), m(false, true, false));
        assert_eq!(TaskKind::Asr.mask(), m(false, false, true));
        assert_eq!(TaskKind::Avsr.mask(), m(false, true, true));
        assert_eq!("avsr".parse::<TaskKind>().unwrap(), TaskKind::Avsr);
        assert!("xyz".parse::<TaskKind>().is_err());
    }

    #[test]
    fn adapter_lengths() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cfg = FusionConfig::default();
        let ad = Modality::ALL.map(|m| LengthAdapter::register(&mut store, m, 16, cfg.stride(m), &mut r));
        let mut g = Graph::new(&store, GradMode::None);
        let run = |g: &mut Graph<'_>, a: &LengthAdapter, t: usize| {
            let v = g.input(Tensor2::zeros(t, 16));
            let f = FrameFeatures { modality: a.modality, rate: 0.0, values: v };
            a.adapt(g, &f).map(|o| g.shape(o).0)
        };
        assert_eq!(run(&mut g, &ad[2], 100).unwrap(), 25);
        assert_eq!(run(&mut g, &ad[0], 40).unwrap(), 20);
        assert_eq!(run(&mut g, &ad[1], 40).unwrap(), 20);
        assert_eq!(run(&mut g, &ad[2], 80).unwrap(), 20);
        assert_eq!(run(&mut g, &ad[2], 101).unwrap(), 25);
        assert!(matches!(run(&mut g, &ad[2], 3), Err(Error::Length(_))));
        assert_eq!(ad[2].output_len(101), Some(25));
    }

    #[test]
    fn fuse_zeroes_masked_blocks() {
        let store = ParamStore::new();
        let enc = EncoderConfig::default();
        let mut g = Graph::new(&store, GradMode::None);
        let mut r = rng();
        let s = g.input(Tensor2::randn(5, 16, 1.0, &mut r));
        let v = g.input(Tensor2::randn(5, 16, 1.0, &mut r));
        let a = g.input(Tensor2::randn(5, 16, 1.0, &mut r));

        let only_audio = AlignedFeatures { audio: Some(a), ..Default::default() };
        let f = fuse(&mut g, &only_audio, TaskKind::Asr.mask(), &enc).unwrap();
        let out = g.value(f);
        assert_eq!(out.shape(), (5, 48));
        for i in 0..5 {
            assert!(out.row(i)[..32].iter().all(|x| *x == 0.0));
            assert_eq!(&out.row(i)[32..], g.value(a).row(i));
        }

        let all = AlignedFeatures { sign: Some(s), lip: Some(v), audio: Some(a) };
        let f = fuse(&mut g, &all, TaskKind::Avsr.mask(), &enc).unwrap();
        let out = g.value(f).clone();
        for i in 0..5 {
            assert!(out.row(i)[..16].iter().all(|x| *x == 0.0));
            assert_eq!(&out.row(i)[16..32], g.value(v).row(i));
            assert_eq!(&out.row(i)[32..], g.value(a).row(i));
        }

        let zeros = g.zeros(5, 16);
        let z = AlignedFeatures { sign: Some(zeros), lip: Some(zeros), audio: Some(zeros) };
        let f = fuse(&mut g, &z, TaskKind::Slt.mask(), &enc).unwrap();
        assert!(g.value(f).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn fuse_errors() {
        let store = ParamStore::new();
        let enc = EncoderConfig::default();
        let mut g = Graph::new(&store, GradMode::None);
        let v = g.zeros(5, 16);
        let a6 = g.zeros(6, 16);
        let lip_only = AlignedFeatures { lip: Some(v), ..Default::default() };
        assert!(matches!(fuse(&mut g, &lip_only, TaskKind::Asr.mask(), &enc), Err(Error::TaskMismatch(_))));
        let skew = AlignedFeatures { lip: Some(v), audio: Some(a6), ..Default::default() };
        assert!(matches!(fuse(&mut g, &skew, TaskKind::Avsr.mask(), &enc), Err(Error::Alignment(_))));
        let mut trimmed = skew;
        assert_eq!(trimmed.trim_to_common(&mut g).unwrap(), 5);
        assert!(fuse(&mut g, &trimmed, TaskKind::Avsr.mask(), &enc).is_ok());
    }

    #[test]
    fn mapping_zero_input_is_task_independent_constant() {
        let mut store = ParamStore::new();
        let map = MappingNetwork::register(&mut store, 48, 56, 64, &mut rng());
        let enc = EncoderConfig::default();
        let mut rows = Vec::new();
        for task in TaskKind::ALL {
            let mut g = Graph::new(&store, GradMode::None);
            let z = g.zeros(4, 16);
            let aligned = AlignedFeatures { sign: Some(z), lip: Some(z), audio: Some(z) };
            let f = fuse(&mut g, &aligned, task.mask(), &enc).unwrap();
            let u = map.map_tokens(&mut g, f).unwrap();
            let out = g.value(u).clone();
            assert_eq!(out.shape(), (4, 64));
            for i in 1..4 {
                assert_eq!(out.row(i), out.row(0));
            }
            rows.push(out);
        }
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
        let mut g = Graph::new(&store, GradMode::None);
        let bad = g.zeros(4, 47);
        assert!(matches!(map.map_tokens(&mut g, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_then_map_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let map = MappingNetwork::register(&mut store, 48, 56, 64, &mut r);
        let enc = EncoderConfig::default();
        let inputs: Vec<Tensor2> = (0..3).map(|_| Tensor2::randn(4, 16, 1.0, &mut r)).collect();
        let probe = Tensor2::randn(64, 1, 1.0, &mut r);
        for task in TaskKind::ALL {
            let eval = |st: &ParamStore, mode: GradMode| -> Result<(f64, Option<crate::diffcore::ParamGrads>)> {
                let mut g = Graph::new(st, mode);
                let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
                let aligned = AlignedFeatures { sign: Some(vars[0]), lip: Some(vars[1]), audio: Some(vars[2]) };
                let f = fuse(&mut g, &aligned, task.mask(), &enc)?;
                let u = map.map_tokens(&mut g, f)?;
                let u = g.gelu(u);
                let p = g.input(probe.clone());
                let col = g.matmul(u, p)?;
                let ones = g.input(Tensor2::filled(1, 4, 1.0));
                let s = g.matmul(ones, col)?;
                let v = g.scalar(s);
                let grads = if mode == GradMode::None { None } else { Some(g.backward(s)?.params) };
                Ok((v, grads))
            };
            let report = check_store(
                &store,
                |st| eval(st, GradMode::All).map(|(v, gr)| (v, gr.expect("grads"))),
                |st| eval(st, GradMode::None).map(|(v, _)| v),
                None,
                1,
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed, "{task}: {report:?}");
        }
    }
}
