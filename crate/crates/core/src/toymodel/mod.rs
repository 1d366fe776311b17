//! A procedurally built vision-language model whose failure modes can be
//! switched on one at a time.
//!
//! Images are a grid of patches. Each object class owns a Walsh-Hadamard
//! pattern; the encoder projects patches onto those patterns and lays the
//! result along fixed directions of the token space:
//!
//! | dims      | meaning                                  |
//! |-----------|------------------------------------------|
//! | `0..16`   | one prototype per object class           |
//! | `16`      | objectness                               |
//! | `17`      | background                               |
//! | `18`      | function words                           |
//! | `19`      | over-emphasis artifact                   |
//! | `20..dim` | background texture                       |

mod encoder;
mod lm;
mod scene;
mod text;
mod vocab;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{NumericsError, Tensor};

pub use lm::{answer_of, decode, Prompt, Sampler};
pub use scene::{
    noise_image, read_scenes, render, sample_scenes, write_scenes, Answer, Image, NoiseDist,
    Provenance, Question, QuestionType, Scene,
};
pub use text::CaptionTokens;
pub use vocab::{
    detokenize, mentioned_objects, tokenize, ObjectClass, Token, CLASS_NAMES, NUM_CLASSES,
    VOCAB_SIZE,
};

pub const DIM_OBJECTNESS: usize = 16;
pub const DIM_BACKGROUND: usize = 17;
pub const DIM_FUNCTION: usize = 18;
pub const DIM_ARTIFACT: usize = 19;
pub const DIM_TEXTURE: usize = 20;

const ROW_OBJECT: usize = 1;
const ROW_OBJECTNESS: usize = 17;
const ROW_VULNERABLE: usize = 18;
const ROW_BACKGROUND: usize = 34;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image shape {got:?} does not match model input {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("visual tokens have shape {got:?}, expected [N, {dim}]")]
    TokenShape { dim: usize, got: Vec<usize> },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("caption has no content tokens")]
    EmptyCaption,
    #[error("scene {id}: {reason}")]
    InvalidScene { id: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometry and readout constants of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    /// Pixel amplitude of an object's class pattern.
    pub object_amplitude: f64,
    /// Pixel amplitude of the shared objectness pattern.
    pub objectness_amplitude: f64,
    /// Half-width of the uniform background texture coefficients.
    pub background_jitter: f64,
    pub object_gain: f64,
    pub objectness_gain: f64,
    pub background_bias: f64,
    pub texture_gain: f64,
    /// Exponent applied to token norms when pooling describe evidence.
    pub attention_power: f64,
    pub describe_gain: f64,
    pub describe_threshold: f64,
    pub exist_gain: f64,
    pub exist_threshold: f64,
    /// Tokens below this fraction of the largest norm are ignored by the
    /// existence readout.
    pub salience: f64,
    pub control_logit: f64,
    /// Weight of the background direction in the embedding of "photo".
    pub photo_background: f64,
    pub vulnerability_cap: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 32,
            object_amplitude: 0.35,
            objectness_amplitude: 0.1,
            background_jitter: 0.003,
            object_gain: 3.0,
            objectness_gain: 0.65,
            background_bias: 1.0,
            texture_gain: 0.2,
            attention_power: 2.0,
            describe_gain: 10.0,
            describe_threshold: 0.14,
            exist_gain: 5.0,
            exist_threshold: 0.5,
            salience: 0.25,
            control_logit: 10.0,
            photo_background: 0.27,
            vulnerability_cap: 2.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let pp = self.patch * self.patch;
        if !pp.is_power_of_two() || pp < 64 {
            return bad(format!("patch area {pp} must be a power of two of at least 64"));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.dim <= DIM_TEXTURE {
            return bad(format!("dim must exceed {DIM_TEXTURE}, got {}", self.dim));
        }
        let amp = self.object_amplitude + self.objectness_amplitude;
        if !(self.object_amplitude > 0.0 && self.objectness_amplitude > 0.0 && amp < 0.5) {
            return bad("pattern amplitudes must be positive and sum below 0.5".into());
        }
        let pos = [
            self.object_gain,
            self.objectness_gain,
            self.background_bias,
            self.attention_power,
            self.describe_gain,
            self.exist_gain,
            self.control_logit,
            self.vulnerability_cap,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("gains, bias, power, cap and control logit must be positive".into());
        }
        let nonneg = [self.background_jitter, self.texture_gain, self.photo_background, self.salience];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("jitter, texture gain, photo weight and salience must be non-negative".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn background_rows(&self) -> usize {
        self.patch * self.patch - ROW_BACKGROUND
    }

    fn texture_dims(&self) -> usize {
        (self.dim - DIM_TEXTURE).min(self.background_rows())
    }
}

/// Over-emphasises tokens that look like `target`: their norm is multiplied by
/// `scale`, with the extra mass placed on the artifact direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatisticalInjector {
    pub target: ObjectClass,
    pub scale: f64,
}

/// Adds `gamma` times the prototype of `dominant` to every visual token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InherentInjector {
    pub dominant: ObjectClass,
    pub gamma: f64,
}

/// Opens a steep, saturating input path that small perturbations can use to
/// push class evidence towards the cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityInjector {
    pub gain: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Injectors {
    pub statistical: Option<StatisticalInjector>,
    pub inherent: Option<InherentInjector>,
    pub vulnerability: Option<VulnerabilityInjector>,
}

impl Injectors {
    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(s) = &self.statistical {
            if !(s.scale.is_finite() && s.scale >= 1.0) {
                return Err(ModelError::InvalidConfig("statistical scale must be >= 1".into()));
            }
        }
        if let Some(i) = &self.inherent {
            if !(i.gamma.is_finite() && i.gamma >= 0.0) {
                return Err(ModelError::InvalidConfig("inherent gamma must be >= 0".into()));
            }
        }
        if let Some(v) = &self.vulnerability {
            if !(v.gain.is_finite() && v.gain >= 0.0) {
                return Err(ModelError::InvalidConfig("vulnerability gain must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Sylvester Hadamard entry `H[r][q]`.
fn hadamard(r: usize, q: usize) -> f64 {
    if (r & q).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Per-channel sign of a class pattern, taken from the bits of the class index.
fn colour_sign(class: usize, channel: usize) -> f64 {
    if (class >> (channel % 4)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A model instance: config, injectors and the precomputed projection and
/// embedding matrices.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    injectors: Injectors,
    gather: Vec<usize>,
    object_patterns: Vec<Vec<f64>>,
    objectness_pattern: Vec<f64>,
    background_patterns: Vec<Vec<f64>>,
    object_proj: Tensor,
    objectness_proj: Tensor,
    vulnerable_proj: Tensor,
    texture_proj: Tensor,
    object_embed: Tensor,
    objectness_embed: Tensor,
    texture_embed: Tensor,
    class_embed: Tensor,
    background_row: Tensor,
    inherent_row: Option<Tensor>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, injectors: Injectors) -> Result<Self, ModelError> {
        config.validate()?;
        injectors.validate()?;
        let pp = config.patch * config.patch;
        let c = config.channels;
        let plen = config.patch_len();
        let d = config.dim;

        let pattern = |row: usize, class: Option<usize>| -> Vec<f64> {
            let mut v = vec![0.0; plen];
            for q in 0..pp {
                for ch in 0..c {
                    let s = class.map_or(1.0, |o| colour_sign(o, ch));
                    v[q * c + ch] = hadamard(row, q) * s;
                }
            }
            v
        };
        let object_patterns: Vec<Vec<f64>> =
            (0..NUM_CLASSES).map(|o| pattern(ROW_OBJECT + o, Some(o))).collect();
        let objectness_pattern = pattern(ROW_OBJECTNESS, None);
        let vulnerable_patterns: Vec<Vec<f64>> =
            (0..NUM_CLASSES).map(|o| pattern(ROW_VULNERABLE + o, None)).collect();
        let background_patterns: Vec<Vec<f64>> = (0..config.background_rows())
            .map(|k| pattern(ROW_BACKGROUND + k, None))
            .collect();

        let proj = |pats: &[Vec<f64>], amp: f64| -> Result<Tensor, NumericsError> {
            let k = amp * plen as f64;
            let mut data = vec![0.0; plen * pats.len()];
            for (j, p) in pats.iter().enumerate() {
                for (i, v) in p.iter().enumerate() {
                    data[i * pats.len() + j] = v / k;
                }
            }
            Tensor::new(vec![plen, pats.len()], data)
        };
        let object_proj = proj(&object_patterns, config.object_amplitude)?;
        let objectness_proj =
            proj(std::slice::from_ref(&objectness_pattern), config.objectness_amplitude)?;
        let vulnerable_proj = proj(&vulnerable_patterns, config.object_amplitude)?;
        let tdims = config.texture_dims();
        let texture_proj = proj(&background_patterns[..tdims], config.object_amplitude)?;

        let basis_rows = |rows: usize, offset: usize, gain: f64| -> Result<Tensor, NumericsError> {
            let mut data = vec![0.0; rows * d];
            for r in 0..rows {
                data[r * d + offset + r] = gain;
            }
            Tensor::new(vec![rows, d], data)
        };
        let object_embed = basis_rows(NUM_CLASSES, 0, config.object_gain)?;
        let class_embed = basis_rows(NUM_CLASSES, 0, 1.0)?;
        let objectness_embed = basis_rows(1, DIM_OBJECTNESS, config.objectness_gain)?;
        let texture_embed = basis_rows(tdims, DIM_TEXTURE, config.texture_gain)?;
        let mut bg = vec![0.0; d];
        bg[DIM_BACKGROUND] = config.background_bias;
        let background_row = Tensor::vector(bg)?;
        let inherent_row = match &injectors.inherent {
            Some(inh) => {
                let mut v = vec![0.0; d];
                v[inh.dominant.index()] = inh.gamma;
                Some(Tensor::vector(v)?)
            }
            None => None,
        };

        let (gr, gc) = config.grid();
        let mut gather = Vec::with_capacity(gr * gc * plen);
        for r in 0..gr {
            for cc in 0..gc {
                for py in 0..config.patch {
                    for px in 0..config.patch {
                        for ch in 0..c {
                            let y = r * config.patch + py;
                            let x = cc * config.patch + px;
                            gather.push((y * config.width + x) * c + ch);
                        }
                    }
                }
            }
        }

        Ok(Self {
            config,
            injectors,
            gather,
            object_patterns,
            objectness_pattern,
            background_patterns,
            object_proj,
            objectness_proj,
            vulnerable_proj,
            texture_proj,
            object_embed,
            objectness_embed,
            texture_embed,
            class_embed,
            background_row,
            inherent_row,
        })
    }

    /// The default geometry with no failure modes switched on.
    pub fn clean() -> Self {
        Self::new(ModelConfig::default(), Injectors::default()).expect("default config is valid")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn injectors(&self) -> &Injectors {
        &self.injectors
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.config.height, self.config.width, self.config.channels]
    }

    /// Hex SHA-256 over the serialized config and injectors.
    pub fn fingerprint(&self) -> String {
        let body = serde_json::to_string(&(&self.config, &self.injectors))
            .expect("model config serializes");
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Unit vector of class `o` in token space.
    pub fn prototype(&self, o: ObjectClass) -> Vec<f64> {
        let mut v = vec![0.0; self.config.dim];
        v[o.index()] = 1.0;
        v
    }

    pub(crate) fn check_tokens(&self, t: &Tensor) -> Result<(), ModelError> {
        if t.rank() != 2 || t.cols() != self.config.dim || t.rows() == 0 {
            return Err(ModelError::TokenShape {
                dim: self.config.dim,
                got: t.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_orthogonal() {
        let m = ToyModel::clean();
        let mut all: Vec<&Vec<f64>> = m.object_patterns.iter().collect();
        all.push(&m.objectness_pattern);
        all.extend(m.background_patterns.iter());
        for i in 0..all.len() {
            for j in 0..all.len() {
                let d = crate::numerics::dot(all[i], all[j]);
                if i == j {
                    assert_eq!(d, 192.0);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = ModelConfig {
            patch: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(ToyModel::new(cfg, Injectors::default()), Err(ModelError::InvalidConfig(_))));
        let cfg = ModelConfig {
            height: 30,
            ..ModelConfig::default()
        };
        assert!(ToyModel::new(cfg, Injectors::default()).is_err());
    }

    #[test]
    fn fingerprint_tracks_injectors() {
        let a = ToyModel::clean();
        let inj = Injectors {
            inherent: Some(InherentInjector {
                dominant: ObjectClass::new(1).unwrap(),
                gamma: 1.0,
            }),
            ..Injectors::default()
        };
        let b = ToyModel::new(ModelConfig::default(), inj).unwrap();
        assert_eq!(a.fingerprint(), ToyModel::clean().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
