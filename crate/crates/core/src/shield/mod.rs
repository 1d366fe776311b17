//! Training-free mitigation: caption-guided reweighting, inherent-bias
//! subtraction, and contrastive decoding against an adversarially perturbed
//! copy of the image.

mod attack;
mod bias;
mod contrast;
mod reweight;

use std::collections::BTreeMap;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{softmax, NumericsError, Tensor};
use crate::seed;
use crate::toymodel::{decode, Image, ModelError, NoiseDist, Prompt, Sampler, Token, ToyModel};

pub use attack::{
    adversarial_tokens, optimize_attack, optimize_caption_attack, AttackObjective, AttackTensor,
    CaptionAlignment,
};
pub use bias::{estimate_inherent_bias, noise_seed, subtract_bias, BiasEstimate};
pub use contrast::{contrastive_step, Plausibility};
pub use reweight::{reweight, similarity_matrix, token_weights};

#[derive(Debug, thiserror::Error)]
pub enum ShieldError {
    #[error("invalid shield config: {0}")]
    InvalidConfig(String),
    #[error("attack produced a non-finite loss or gradient at step {step}")]
    AttackDiverged { step: usize },
    #[error("bias cache was built for model {found}, current model is {expected}")]
    CacheMismatch { expected: String, found: String },
    #[error("bias cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// What the clean branch is contrasted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Tokens of the image after the caption attack.
    #[default]
    Adversarial,
    /// Tokens of the image with additive Gaussian pixel noise.
    VcdNoise,
    /// Plain decoding from the clean branch.
    Off,
}

impl std::str::FromStr for ContrastMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adversarial" | "adv" => Ok(Self::Adversarial),
            "vcd_noise" => Ok(Self::VcdNoise),
            "off" => Ok(Self::Off),
            _ => Err(format!("unknown contrast mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Number of noise images behind the bias estimate.
    pub noise_samples: usize,
    pub lr: f64,
    pub attack_steps: usize,
    pub seed: u64,
    pub reweight: bool,
    pub subtract: bool,
    pub contrast: ContrastMode,
    pub noise_dist: NoiseDist,
    pub plausibility: Plausibility,
    pub vcd_sigma: f64,
    pub max_caption_len: usize,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.35,
            noise_samples: 32,
            lr: 0.02,
            attack_steps: 8,
            seed: 0,
            reweight: true,
            subtract: true,
            contrast: ContrastMode::Adversarial,
            noise_dist: NoiseDist::Uniform,
            plausibility: Plausibility::Clean,
            vcd_sigma: 0.1,
            max_caption_len: 16,
        }
    }
}

impl ShieldConfig {
    /// Every stage off and no plausibility cut: plain decoding.
    pub fn vanilla() -> Self {
        Self {
            reweight: false,
            subtract: false,
            contrast: ContrastMode::Off,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ShieldError> {
        let bad = |m: String| Err(ShieldError::InvalidConfig(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.noise_samples == 0 {
            return bad("noise sample count must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.vcd_sigma.is_finite() && self.vcd_sigma >= 0.0) {
            return bad(format!("vcd sigma must be >= 0, got {}", self.vcd_sigma));
        }
        if self.max_caption_len == 0 {
            return bad("max caption length must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-sample record of what the pipeline did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PerSampleTrace {
    pub naive_caption: Option<Vec<usize>>,
    pub weights: Option<Vec<f64>>,
    pub loss_trace: Vec<f64>,
    /// Wall time per stage in milliseconds.
    pub timings_ms: BTreeMap<String, f64>,
}

/// Visual tokens of one image after the configured stages, ready to decode.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clean: Tensor,
    pub contrast: Option<Tensor>,
    pub trace: PerSampleTrace,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The mitigation pipeline bound to one model and config.
#[derive(Debug, Clone)]
pub struct Shield<'a> {
    model: &'a ToyModel,
    config: ShieldConfig,
    bias: Option<BiasEstimate>,
}

impl<'a> Shield<'a> {
    /// Builds the pipeline, estimating the inherent bias if subtraction is on
    /// and no estimate is supplied.
    pub fn new(
        model: &'a ToyModel,
        config: ShieldConfig,
        bias: Option<BiasEstimate>,
    ) -> Result<Self, ShieldError> {
        config.validate()?;
        let bias = match (config.subtract, bias) {
            (true, None) => Some(estimate_inherent_bias(
                model,
                config.noise_samples,
                config.noise_dist,
                config.seed,
            )?),
            (_, b) => b,
        };
        if let Some(b) = &bias {
            if b.model_fingerprint != model.fingerprint() {
                return Err(ShieldError::CacheMismatch {
                    expected: model.fingerprint(),
                    found: b.model_fingerprint.clone(),
                });
            }
        }
        Ok(Self { model, config, bias })
    }

    pub fn config(&self) -> &ShieldConfig {
        &self.config
    }

    pub fn bias(&self) -> Option<&BiasEstimate> {
        self.bias.as_ref()
    }

    /// Runs every image-level stage. `sample_seed` drives the noise used by the
    /// noise-contrast mode.
    pub fn prepare(&self, image: &Image, sample_seed: u64) -> Result<Prepared, ShieldError> {
        let cfg = &self.config;
        let mut trace = PerSampleTrace::default();
        let t0 = Instant::now();
        let raw = self.model.encode(image)?;
        trace.timings_ms.insert("encode".into(), elapsed_ms(t0));

        let needs_caption = cfg.reweight || cfg.contrast == ContrastMode::Adversarial;
        let caption = if needs_caption {
            let t = Instant::now();
            let c = self
                .model
                .generate(&raw, &Prompt::Describe, Sampler::Greedy, cfg.max_caption_len)?;
            trace.timings_ms.insert("caption".into(), elapsed_ms(t));
            trace.naive_caption = Some(c.iter().map(|t| t.id()).collect());
            Some(c)
        } else {
            None
        };

        let mut clean = raw;
        if cfg.reweight {
            let t = Instant::now();
            let cap = caption.as_deref().expect("caption generated for reweighting");
            let ct = self.model.encode_text(cap)?;
            let w = token_weights(&similarity_matrix(&clean, &ct.tokens)?)?;
            clean = reweight(&clean, &w)?;
            trace.weights = Some(w);
            trace.timings_ms.insert("reweight".into(), elapsed_ms(t));
        }
        if cfg.subtract {
            let t = Instant::now();
            let b = self.bias.as_ref().expect("bias estimated in constructor");
            clean = subtract_bias(&clean, b)?;
            trace.timings_ms.insert("subtract".into(), elapsed_ms(t));
        }

        let contrast = match cfg.contrast {
            ContrastMode::Off => None,
            ContrastMode::Adversarial => {
                let t = Instant::now();
                let cap = caption.as_deref().expect("caption generated for the attack");
                let a = optimize_caption_attack(self.model, image, cap, cfg.lr, cfg.attack_steps)?;
                trace.loss_trace = a.loss_trace;
                let adv = adversarial_tokens(self.model, image, &a.delta)?;
                trace.timings_ms.insert("attack".into(), elapsed_ms(t));
                Some(adv)
            }
            ContrastMode::VcdNoise => {
                let t = Instant::now();
                let noisy = vcd_noise_image(image, cfg.vcd_sigma, sample_seed)?;
                let tok = self.model.encode(&noisy)?;
                trace.timings_ms.insert("noise".into(), elapsed_ms(t));
                Some(tok)
            }
        };
        Ok(Prepared {
            clean,
            contrast,
            trace,
        })
    }

    /// Next-token distribution for `prompt` after `prefix`.
    pub fn step(
        &self,
        prepared: &Prepared,
        prompt: &Prompt,
        prefix: &[Token],
    ) -> Result<Vec<f64>, ShieldError> {
        let cfg = &self.config;
        let lc = self.model.lm_logits(&prepared.clean, prompt, prefix)?;
        match &prepared.contrast {
            Some(adv) => {
                let la = self.model.lm_logits(adv, prompt, prefix)?;
                contrastive_step(&lc, &la, cfg.alpha, cfg.beta, cfg.plausibility)
            }
            None if cfg.beta > 0.0 => {
                contrastive_step(&lc, &lc, 0.0, cfg.beta, cfg.plausibility)
            }
            None => Ok(softmax(&lc)?),
        }
    }

    pub fn generate(
        &self,
        prepared: &Prepared,
        prompt: &Prompt,
        sampler: Sampler,
        max_len: usize,
    ) -> Result<Vec<Token>, ShieldError> {
        decode(max_len, sampler, |prefix| self.step(prepared, prompt, prefix))
    }

    /// Prepare and decode in one call.
    pub fn run(
        &self,
        image: &Image,
        prompt: &Prompt,
        sampler: Sampler,
        sample_seed: u64,
    ) -> Result<(Vec<Token>, PerSampleTrace), ShieldError> {
        let mut p = self.prepare(image, sample_seed)?;
        let t = Instant::now();
        let out = self.generate(&p, prompt, sampler, self.config.max_caption_len)?;
        p.trace.timings_ms.insert("decode".into(), elapsed_ms(t));
        Ok((out, p.trace))
    }
}

/// One-shot form of [`Shield::run`].
pub fn shield_generate(
    model: &ToyModel,
    image: &Image,
    prompt: &Prompt,
    config: &ShieldConfig,
    bias: Option<BiasEstimate>,
    sampler: Sampler,
) -> Result<(Vec<Token>, PerSampleTrace), ShieldError> {
    let shield = Shield::new(model, config.clone(), bias)?;
    shield.run(image, prompt, sampler, config.seed)
}

/// The image plus `N(0, sigma^2)` pixel noise, clipped to `[0, 1]`.
pub fn vcd_noise_image(image: &Image, sigma: f64, sample_seed: u64) -> Result<Image, ShieldError> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| ShieldError::InvalidConfig(format!("vcd sigma: {e}")))?;
    let mut rng = seed::rng(seed::derive(&[sample_seed, 0x766364]));
    let noise: Vec<f64> = (0..image.pixels.len()).map(|_| normal.sample(&mut rng)).collect();
    let delta = Tensor::new(image.pixels.shape().to_vec(), noise)?;
    Ok(image.perturbed(&delta)?)
}
