//! Inherent-bias estimate from pure-noise images, and its on-disk cache.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ShieldError;
use crate::numerics::{load_tensor, save_tensor, NumericsError, Tensor};
use crate::seed;
use crate::toymodel::{noise_image, NoiseDist, ToyModel};

/// Mean visual tokens over `samples` noise images.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    pub mean: Tensor,
    pub samples: usize,
    pub seed: u64,
    pub noise_dist: NoiseDist,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Sidecar {
    model_fingerprint: String,
    #[serde(rename = "K")]
    k: usize,
    noise_dist: NoiseDist,
    seed: u64,
}

/// Seed of the `k`-th noise image of an estimate.
pub fn noise_seed(seed: u64, k: usize) -> u64 {
    seed::derive(&[seed, 0x6e6f697365, k as u64])
}

pub fn estimate_inherent_bias(
    model: &ToyModel,
    samples: usize,
    noise_dist: NoiseDist,
    seed: u64,
) -> Result<BiasEstimate, ShieldError> {
    if samples == 0 {
        return Err(ShieldError::InvalidConfig("noise sample count must be at least 1".into()));
    }
    let mut sum: Option<Tensor> = None;
    for k in 0..samples {
        let img = noise_image(model.config(), noise_seed(seed, k), noise_dist);
        let t = model.encode(&img)?;
        sum = Some(match sum {
            Some(s) => s.add(&t)?,
            None => t,
        });
    }
    let mean = sum.expect("at least one sample").scale(1.0 / samples as f64)?;
    Ok(BiasEstimate {
        mean,
        samples,
        seed,
        noise_dist,
        model_fingerprint: model.fingerprint(),
    })
}

/// Visual tokens minus the bias estimate.
pub fn subtract_bias(visual: &Tensor, bias: &BiasEstimate) -> Result<Tensor, ShieldError> {
    if visual.shape() != bias.mean.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "subtract_bias",
            left: visual.shape().to_vec(),
            right: bias.mean.shape().to_vec(),
        }
        .into());
    }
    Ok(visual.sub(&bias.mean)?)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl BiasEstimate {
    /// Writes the tensor to `path` and metadata to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<(), ShieldError> {
        save_tensor(&self.mean, path)?;
        let meta = Sidecar {
            model_fingerprint: self.model_fingerprint.clone(),
            k: self.samples,
            noise_dist: self.noise_dist,
            seed: self.seed,
        };
        let body = serde_json::to_string_pretty(&meta)
            .map_err(|e| ShieldError::Cache(e.to_string()))?;
        std::fs::write(sidecar_path(path), body + "\n").map_err(NumericsError::from)?;
        Ok(())
    }

    /// Loads a cached estimate, rejecting it if it was built for another model.
    pub fn load(path: &Path, model: &ToyModel) -> Result<Self, ShieldError> {
        let body = std::fs::read_to_string(sidecar_path(path)).map_err(NumericsError::from)?;
        let meta: Sidecar =
            serde_json::from_str(&body).map_err(|e| ShieldError::Cache(e.to_string()))?;
        let expected = model.fingerprint();
        if meta.model_fingerprint != expected {
            return Err(ShieldError::CacheMismatch {
                expected,
                found: meta.model_fingerprint,
            });
        }
        let mean = load_tensor(path)?;
        let want = [model.config().num_tokens(), model.config().dim];
        if mean.shape() != want {
            return Err(ShieldError::Cache(format!(
                "cached tensor has shape {:?}, expected {want:?}",
                mean.shape()
            )));
        }
        Ok(Self {
            mean,
            samples: meta.k,
            seed: meta.seed,
            noise_dist: meta.noise_dist,
            model_fingerprint: meta.model_fingerprint,
        })
    }

    /// Reuses the cache at `path` when it matches every parameter, otherwise
    /// recomputes and overwrites it.
    pub fn load_or_compute(
        path: &Path,
        model: &ToyModel,
        samples: usize,
        noise_dist: NoiseDist,
        seed: u64,
    ) -> Result<Self, ShieldError> {
        if path.exists() {
            if let Ok(b) = Self::load(path, model) {
                if b.samples == samples && b.noise_dist == noise_dist && b.seed == seed {
                    return Ok(b);
                }
            }
        }
        let b = estimate_inherent_bias(model, samples, noise_dist, seed)?;
        b.save(path)?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{InherentInjector, Injectors, ModelConfig};

    #[test]
    fn single_sample_equals_its_encoding() {
        let m = ToyModel::clean();
        let b = estimate_inherent_bias(&m, 1, NoiseDist::Uniform, 3).unwrap();
        let img = noise_image(m.config(), noise_seed(3, 0), NoiseDist::Uniform);
        assert_eq!(b.mean, m.encode(&img).unwrap());
    }

    #[test]
    fn zero_samples_rejected() {
        let m = ToyModel::clean();
        assert!(matches!(
            estimate_inherent_bias(&m, 0, NoiseDist::Uniform, 0),
            Err(ShieldError::InvalidConfig(_))
        ));
    }

    #[test]
    fn cache_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bias.bin");
        let m = ToyModel::clean();
        let b = estimate_inherent_bias(&m, 4, NoiseDist::Gaussian, 1).unwrap();
        b.save(&path).unwrap();
        assert_eq!(BiasEstimate::load(&path, &m).unwrap(), b);

        let inj = Injectors {
            inherent: Some(InherentInjector {
                dominant: "car".parse().unwrap(),
                gamma: 1.0,
            }),
            ..Injectors::default()
        };
        let other = ToyModel::new(ModelConfig::default(), inj).unwrap();
        assert!(matches!(
            BiasEstimate::load(&path, &other),
            Err(ShieldError::CacheMismatch { .. })
        ));
        let fresh = BiasEstimate::load_or_compute(&path, &other, 4, NoiseDist::Gaussian, 1).unwrap();
        assert_eq!(fresh.model_fingerprint, other.fingerprint());
        assert_eq!(BiasEstimate::load(&path, &other).unwrap(), fresh);
    }
}
