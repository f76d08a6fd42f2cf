//! One entry point over every model variant.
//!
//! [`Model`] dispatches forward/backward/loss to the two-stream network or
//! one of the baselines, so training, evaluation and localization are
//! written once.

mod checkpoint;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    binary_log_loss, binary_log_loss_grad, OneStreamCache, OneStreamModel, WsddnCache,
    WsddnTypeModel,
};
use crate::data::{Modality, VideoBag};
use crate::error::{Error, Result};
use crate::nn::{GradStore, Parameters, Pass};
use crate::real::Real;
use crate::scoring::{hinge_loss, hinge_loss_grad, AVModel, FusionMode, ScoreCache};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Layer widths and input dimensions shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual_hidden: Vec<usize>,
    pub audio_hidden: Vec<usize>,
    pub dropout: f64,
}

impl ArchConfig {
    /// caffenet RoI features (9216) through fc6/fc7 (4096 each); vggish
    /// embeddings (128) through one 128-unit layer; 50% dropout.
    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            visual_dim: 9216,
            audio_dim: 128,
            visual_hidden: vec![4096, 4096],
            audio_hidden: vec![128],
            dropout: 0.5,
        }
    }

    /// Laptop-sized widths for synthetic data: 32/32 visual, 16 audio.
    pub fn desk(num_classes: usize, visual_dim: usize, audio_dim: usize) -> Self {
        Self {
            num_classes,
            visual_dim,
            audio_dim,
            visual_hidden: vec![32, 32],
            audio_hidden: vec![16],
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::invalid("class count and feature dims must be positive"));
        }
        if self.visual_hidden.contains(&0) || self.audio_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TwoStream,
    OneStream,
    WsddnType,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TwoStream => "two_stream",
            ModelKind::OneStream => "one_stream",
            ModelKind::WsddnType => "wsddn_type",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stream" => Ok(ModelKind::TwoStream),
            "one_stream" => Ok(ModelKind::OneStream),
            "wsddn_type" => Ok(ModelKind::WsddnType),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Hinge,
    BinaryLogLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub mode: FusionMode,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, mode: FusionMode, arch: ArchConfig) -> Result<Self> {
        let config = Self { kind, mode, arch };
        config.validate()?;
        Ok(config)
    }

    /// WSDDN-type is single-modality only.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.kind == ModelKind::WsddnType && self.mode == FusionMode::Av {
            return Err(Error::invalid(
                "wsddn_type is single-modality: use --mode visual_only or audio_only",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    TwoStream(AVModel<T>),
    OneStream(OneStreamModel<T>),
    WsddnType(WsddnTypeModel<T>),
}

#[derive(Debug, Clone)]
pub enum ModelCache<T> {
    TwoStream(ScoreCache<T>),
    OneStream(OneStreamCache<T>),
    WsddnType(WsddnCache<T>),
}

impl<T> ModelCache<T> {
    /// Every ReLU input of the forward pass, visual tower first.
    pub fn pre_activations(&self) -> Vec<&Array2<T>> {
        let stacks: Vec<&crate::scoring::FcCache<T>> = match self {
            ModelCache::TwoStream(c) => c.visual.iter().chain(&c.audio).map(|m| m.stack()).collect(),
            ModelCache::OneStream(c) => c.visual.iter().chain(&c.audio).map(|m| m.stack()).collect(),
            ModelCache::WsddnType(c) => vec![c.stack()],
        };
        stacks.into_iter().flat_map(|s| s.pre_activations()).collect()
    }
}

/// Per-proposal evidence for every class: the `D` matrix of two-stream and
/// WSDDN-type models and the classification stream `A` of the one-stream
/// baseline. `None` for a modality the model does not use.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence<T> {
    pub visual: Option<Array2<T>>,
    pub audio: Option<Array2<T>>,
}

impl<T> Evidence<T> {
    pub fn modality(&self, modality: Modality) -> Option<&Array2<T>> {
        match modality {
            Modality::Visual => self.visual.as_ref(),
            Modality::Audio => self.audio.as_ref(),
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            ModelKind::TwoStream => Model::TwoStream(AVModel::new(&config.arch, config.mode, rng)),
            ModelKind::OneStream => {
                Model::OneStream(OneStreamModel::new(&config.arch, config.mode, rng))
            }
            ModelKind::WsddnType => {
                let modality = match config.mode {
                    FusionMode::AudioOnly => Modality::Audio,
                    _ => Modality::Visual,
                };
                Model::WsddnType(WsddnTypeModel::new(&config.arch, modality, rng))
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::TwoStream(_) => ModelKind::TwoStream,
            Model::OneStream(_) => ModelKind::OneStream,
            Model::WsddnType(_) => ModelKind::WsddnType,
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Model::TwoStream(m) => m.mode,
            Model::OneStream(m) => m.mode,
            Model::WsddnType(m) => match m.modality {
                Modality::Visual => FusionMode::VisualOnly,
                Modality::Audio => FusionMode::AudioOnly,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::TwoStream(m) => m.num_classes(),
            Model::OneStream(m) => m.num_classes(),
            Model::WsddnType(m) => m.num_classes(),
        }
    }

    pub fn objective(&self) -> Objective {
        match self {
            Model::WsddnType(_) => Objective::BinaryLogLoss,
            _ => Objective::Hinge,
        }
    }

    pub fn forward(&self, bag: &VideoBag, pass: &mut Pass<'_>) -> Result<(Array1<T>, ModelCache<T>)> {
        Ok(match self {
            Model::TwoStream(m) => {
                let (phi, c) = m.forward(bag, pass)?;
                (phi, ModelCache::TwoStream(c))
            }
            Model::OneStream(m) => {
                let (phi, c) = m.forward(bag, pass)?;
                (phi, ModelCache::OneStream(c))
            }
            Model::WsddnType(m) => {
                let (phi, c) = m.forward(bag, pass)?;
                (phi, ModelCache::WsddnType(c))
            }
        })
    }

    /// Evaluation-mode video scores.
    pub fn scores(&self, bag: &VideoBag) -> Result<Array1<T>> {
        Ok(self.forward(bag, &mut Pass::Eval)?.0)
    }

    pub fn backward(&self, cache: &ModelCache<T>, d_phi: ArrayView1<'_, T>) -> Result<GradStore<T>> {
        Ok(match (self, cache) {
            (Model::TwoStream(m), ModelCache::TwoStream(c)) => m.backward(c, d_phi),
            (Model::OneStream(m), ModelCache::OneStream(c)) => m.backward(c, d_phi),
            (Model::WsddnType(m), ModelCache::WsddnType(c)) => m.backward(c, d_phi),
            _ => return Err(Error::invalid("cache does not belong to this model variant")),
        })
    }

    /// Batch loss and `∂L/∂φ` for this model's training objective.
    pub fn loss_and_grad(&self, phi: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        match self.objective() {
            Objective::Hinge => Ok((hinge_loss(phi, y)?, hinge_loss_grad(phi, y)?)),
            Objective::BinaryLogLoss => Ok((binary_log_loss(phi, y)?, binary_log_loss_grad(phi, y)?)),
        }
    }

    /// Evaluation-mode per-proposal evidence.
    pub fn evidence(&self, bag: &VideoBag) -> Result<Evidence<T>> {
        let (_, cache) = self.forward(bag, &mut Pass::Eval)?;
        Ok(match cache {
            ModelCache::TwoStream(c) => Evidence {
                visual: c.visual.map(|m| m.scores.d),
                audio: c.audio.map(|m| m.scores.d),
            },
            ModelCache::OneStream(c) => Evidence {
                visual: c.visual.map(|m| m.a),
                audio: c.audio.map(|m| m.a),
            },
            ModelCache::WsddnType(c) => {
                let d = Some(c.d);
                match self.mode() {
                    FusionMode::AudioOnly => Evidence { visual: None, audio: d },
                    _ => Evidence { visual: d, audio: None },
                }
            }
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        match self {
            Model::TwoStream(m) => Model::TwoStream(m.cast()),
            Model::OneStream(m) => Model::OneStream(m.cast()),
            Model::WsddnType(m) => Model::WsddnType(m.cast()),
        }
    }
}

impl<T: Real> Parameters<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        match self {
            Model::TwoStream(m) => m.visit(f),
            Model::OneStream(m) => m.visit(f),
            Model::WsddnType(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        match self {
            Model::TwoStream(m) => m.visit_mut(f),
            Model::OneStream(m) => m.visit_mut(f),
            Model::WsddnType(m) => m.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wsddn_rejects_av() {
        let arch = ArchConfig::desk(5, 32, 16);
        assert!(ModelConfig::new(ModelKind::WsddnType, FusionMode::Av, arch.clone()).is_err());
        assert!(ModelConfig::new(ModelKind::WsddnType, FusionMode::AudioOnly, arch).is_ok());
    }

    #[test]
    fn audio_only_has_no_visual_params() {
        let config =
            ModelConfig::new(ModelKind::TwoStream, FusionMode::AudioOnly, ArchConfig::desk(5, 32, 16))
                .unwrap();
        let model = Model::<f32>::new(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<_> = model.param_layout().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["audio.fc0.weight", "audio.fc0.bias", "audio.cls.weight", "audio.cls.bias", "audio.loc.weight", "audio.loc.bias"]
        );
    }

    #[test]
    fn full_arch_shapes() {
        let arch = ArchConfig::full(17);
        assert_eq!(arch.visual_hidden, vec![4096, 4096]);
        assert_eq!((arch.visual_dim, arch.audio_dim), (9216, 128));
        assert!(arch.validate().is_ok());
    }
}
