//! Toy modality encoders with the frame-rate contracts of the real backbones:
//! sign and lip keep their input rate, audio halves it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradMode, Graph, ParamId, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};
use crate::synthcorpus::{Modality, ModalityStream};

/// Shortest raw input any encoder accepts (one word of sign or lip frames).
pub const MIN_INPUT_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output width per modality (sign, lip, audio).
    pub sign_dims: usize,
    pub lip_dims: usize,
    pub audio_dims: usize,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { sign_dims: 16, lip_dims: 16, audio_dims: 16, kernel: 3 }
    }
}

impl EncoderConfig {
    pub fn out_dims(&self, m: Modality) -> usize {
        match m {
            Modality::Sign => self.sign_dims,
            Modality::Lip => self.lip_dims,
            Modality::Audio => self.audio_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sign_dims == 0 || self.lip_dims == 0 || self.audio_dims == 0 {
            return Err(Error::Config("encoders.*_dims must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("encoders.kernel={} must be odd to preserve length", self.kernel)));
        }
        Ok(())
    }
}

/// Encoder output `F_m` (frames × D_m) at the encoder's output rate.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeatures {
    pub modality: Modality,
    /// Frames per unit time.
    pub rate: f64,
    pub values: Var,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn register<R: Rng>(store: &mut ParamStore, name: &str, k: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((k * c_in) as f64).sqrt();
        let w = store.insert(format!("{name}.w"), Tensor2::randn(k * c_in, c_out, std, rng), true);
        let b = store.insert(format!("{name}.b"), Tensor2::zeros(1, c_out), true);
        Conv { w, b }
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var, k: usize, stride: usize) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b, k, stride)
    }
}

/// One modality encoder: two length-preserving conv blocks (plus a ×2
/// downsampling block for audio) and a pointwise projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    modality: Modality,
    kernel: usize,
    block1: Conv,
    down: Option<Conv>,
    block2: Conv,
    proj: Conv,
}

impl Encoder {
    pub fn register<R: Rng>(store: &mut ParamStore, modality: Modality, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let name = format!("enc.{}", modality.name());
        let d = cfg.out_dims(modality);
        let k = cfg.kernel;
        let block1 = Conv::register(store, &format!("{name}.c1"), k, modality.dims(), d, rng);
        let down = (modality == Modality::Audio).then(|| Conv::register(store, &format!("{name}.down"), 2, d, d, rng));
        let block2 = Conv::register(store, &format!("{name}.c2"), k, d, d, rng);
        let proj = Conv::register(store, &format!("{name}.proj"), 1, d, d, rng);
        Encoder { modality, kernel: k, block1, down, block2, proj }
    }

    /// Rebinds to parameters already present in `store` (checkpoint load).
    pub fn bind(store: &ParamStore, modality: Modality, cfg: &EncoderConfig) -> Result<Self> {
        let name = format!("enc.{}", modality.name());
        let conv = |s: &str| -> Result<Conv> {
            Ok(Conv { w: store.expect_id(&format!("{name}.{s}.w"))?, b: store.expect_id(&format!("{name}.{s}.b"))? })
        };
        Ok(Encoder {
            modality,
            kernel: cfg.kernel,
            block1: conv("c1")?,
            down: if modality == Modality::Audio { Some(conv("down")?) } else { None },
            block2: conv("c2")?,
            proj: conv("proj")?,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Output frames for `raw` input frames.
    pub fn output_len(&self, raw: usize) -> usize {
        if self.down.is_some() {
            raw / 2
        } else {
            raw
        }
    }

    fn check(&self, stream: &ModalityStream) -> Result<()> {
        if stream.modality != self.modality {
            return Err(Error::Modality(format!(
                "{} encoder received a {} stream",
                self.modality.name(),
                stream.modality.name()
            )));
        }
        let t = stream.num_frames();
        if t < MIN_INPUT_FRAMES {
            return Err(Error::Length(format!(
                "{} stream has {t} frames, encoder needs at least {MIN_INPUT_FRAMES}",
                self.modality.name()
            )));
        }
        if self.down.is_some() && t % 2 != 0 {
            return Err(Error::Length(format!("audio stream has an odd frame count {t}")));
        }
        if stream.dims() != self.modality.dims() {
            return Err(Error::Dimension(format!(
                "{} stream has {} channels, encoder expects {}",
                self.modality.name(),
                stream.dims(),
                self.modality.dims()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let h = g.edge_pad(x, pad)?;
        let h = self.block1.apply(g, h, self.kernel, 1)?;
        let mut h = g.gelu(h);
        if let Some(down) = &self.down {
            let d = down.apply(g, h, 2, 2)?;
            h = g.gelu(d);
        }
        let h2 = g.edge_pad(h, pad)?;
        let h2 = self.block2.apply(g, h2, self.kernel, 1)?;
        let h2 = g.gelu(h2);
        self.proj.apply(g, h2, 1, 1)
    }

    /// Validates the stream, adds it to the graph and encodes it.
    pub fn encode(&self, g: &mut Graph<'_>, stream: &ModalityStream) -> Result<FrameFeatures> {
        self.check(stream)?;
        let x = g.input(stream.frames.clone());
        let values = self.forward(g, x)?;
        let rate = f64::from(stream.frame_rate) * if self.down.is_some() { 0.5 } else { 1.0 };
        Ok(FrameFeatures { modality: self.modality, rate, values })
    }

    /// Forward-only convenience returning the feature matrix.
    pub fn encode_values(&self, store: &ParamStore, stream: &ModalityStream) -> Result<Tensor2> {
        let mut g = Graph::new(store, GradMode::None);
        let f = self.encode(&mut g, stream)?;
        Ok(g.value(f.values).clone())
    }
}
