//! Run configuration and its flat `key = value` file format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `seed` | global seed | 0 |
//! | `mode` | `vanilla`, `shield`, `vcd_noise` or `ablation` | `shield` |
//! | `out` | output directory | `out` |
//! | `dataset` | directory written by `gen-dataset`, or `none` | `none` |
//! | `bias_cache` | bias tensor file, or `none` | `none` |
//! | `jobs` | worker threads, 0 for one per core | 0 |
//! | `n_scenes` | scenes generated when no dataset is given | 100 |
//! | `max_objects` | objects per generated scene | 3 |
//! | `sampler` | `greedy` or `seeded` | `greedy` |
//! | `input_attack_steps` | attack steps applied to inputs before evaluation | 0 |
//! | `judge_model` | model name sent to the judge, or `none` | `none` |
//! | `alpha`, `beta`, `K`, `lr`, `attack_steps` | decoding and attack settings | 2, 0.35, 32, 0.02, 8 |
//! | `reweight`, `subtract` | stage switches | `true` |
//! | `contrast` | `adversarial`, `vcd_noise` or `off` | `adversarial` |
//! | `noise_dist` | `uniform` or `gaussian` | `uniform` |
//! | `plausibility` | `clean` or `contrastive` | `clean` |
//! | `vcd_sigma`, `max_caption_len` | | 0.1, 16 |
//! | `height`, `width`, `channels`, `patch`, `dim` | model dimensions | 32, 32, 3, 8, 32 |
//! | `stat_class`, `stat_scale` | statistical injector target (or `none`) and scale | `none`, 4 |
//! | `inherent_class`, `inherent_gamma` | inherent injector class (or `none`) and strength | `none`, 1 |
//! | `vuln_gain` | vulnerability injector gain, 0 for off | 0 |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use shield_core::shield::{ContrastMode, Plausibility};
use shield_core::toymodel::{
    InherentInjector, Injectors, NoiseDist, StatisticalInjector, VulnerabilityInjector,
};
use shield_core::{ModelConfig, ObjectClass, ShieldConfig, ToyModel};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Vanilla,
    #[default]
    Shield,
    VcdNoise,
    Ablation,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "shield" => Ok(Self::Shield),
            "vcd_noise" => Ok(Self::VcdNoise),
            "ablation" => Ok(Self::Ablation),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Shield => "shield",
            Self::VcdNoise => "vcd_noise",
            Self::Ablation => "ablation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    #[default]
    Greedy,
    /// Multinomial sampling seeded per sample.
    Seeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub bias_cache: Option<PathBuf>,
    pub jobs: usize,
    pub n_scenes: usize,
    pub max_objects: usize,
    pub sampler: SamplerKind,
    pub input_attack_steps: usize,
    pub judge_model: Option<String>,
    /// Its `seed` field is overwritten by [`RunConfig::seed`].
    pub shield: ShieldConfig,
    pub model: ModelConfig,
    pub stat_class: Option<ObjectClass>,
    pub stat_scale: f64,
    pub inherent_class: Option<ObjectClass>,
    pub inherent_gamma: f64,
    pub vulnerability_gain: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Shield,
            out_dir: PathBuf::from("out"),
            dataset: None,
            bias_cache: None,
            jobs: 0,
            n_scenes: 100,
            max_objects: 3,
            sampler: SamplerKind::Greedy,
            input_attack_steps: 0,
            judge_model: None,
            shield: ShieldConfig::default(),
            model: ModelConfig::default(),
            stat_class: None,
            stat_scale: 4.0,
            inherent_class: None,
            inherent_gamma: 1.0,
            vulnerability_gain: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "dataset" => self.dataset = optional(key, v)?,
            "bias_cache" => self.bias_cache = optional(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "n_scenes" => self.n_scenes = parse(key, v)?,
            "max_objects" => self.max_objects = parse(key, v)?,
            "sampler" => {
                self.sampler = match v {
                    "greedy" => SamplerKind::Greedy,
                    "seeded" => SamplerKind::Seeded,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected greedy or seeded".into(),
                        })
                    }
                }
            }
            "input_attack_steps" => self.input_attack_steps = parse(key, v)?,
            "judge_model" => self.judge_model = optional(key, v)?,
            "alpha" => self.shield.alpha = parse(key, v)?,
            "beta" => self.shield.beta = parse(key, v)?,
            "K" => self.shield.noise_samples = parse(key, v)?,
            "lr" => self.shield.lr = parse(key, v)?,
            "attack_steps" => self.shield.attack_steps = parse(key, v)?,
            "reweight" => self.shield.reweight = parse(key, v)?,
            "subtract" => self.shield.subtract = parse(key, v)?,
            "contrast" => self.shield.contrast = parse::<ContrastMode>(key, v)?,
            "noise_dist" => self.shield.noise_dist = parse::<NoiseDist>(key, v)?,
            "plausibility" => {
                self.shield.plausibility = match v {
                    "clean" => Plausibility::Clean,
                    "contrastive" => Plausibility::Contrastive,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected clean or contrastive".into(),
                        })
                    }
                }
            }
            "vcd_sigma" => self.shield.vcd_sigma = parse(key, v)?,
            "max_caption_len" => self.shield.max_caption_len = parse(key, v)?,
            "height" => self.model.height = parse(key, v)?,
            "width" => self.model.width = parse(key, v)?,
            "channels" => self.model.channels = parse(key, v)?,
            "patch" => self.model.patch = parse(key, v)?,
            "dim" => self.model.dim = parse(key, v)?,
            "stat_class" => self.stat_class = optional(key, v)?,
            "stat_scale" => self.stat_scale = parse(key, v)?,
            "inherent_class" => self.inherent_class = optional(key, v)?,
            "inherent_gamma" => self.inherent_gamma = parse(key, v)?,
            "vuln_gain" => self.vulnerability_gain = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    reason: "empty key or value".into(),
                });
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Shield settings with the global seed applied.
    pub fn shield_config(&self) -> ShieldConfig {
        ShieldConfig {
            seed: self.seed,
            ..self.shield.clone()
        }
    }

    pub fn injectors(&self) -> Injectors {
        Injectors {
            statistical: self.stat_class.map(|target| StatisticalInjector {
                target,
                scale: self.stat_scale,
            }),
            inherent: self.inherent_class.map(|dominant| InherentInjector {
                dominant,
                gamma: self.inherent_gamma,
            }),
            vulnerability: (self.vulnerability_gain != 0.0).then_some(VulnerabilityInjector {
                gain: self.vulnerability_gain,
            }),
        }
    }

    /// Checks every setting, including the model and shield parts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.injectors().validate().map_err(|e| inv(&e))?;
        self.shield_config().validate().map_err(|e| inv(&e))?;
        if self.max_objects == 0 || self.max_objects > self.model.num_tokens() {
            return Err(ConfigError::Invalid(format!(
                "max_objects must lie in 1..={}",
                self.model.num_tokens()
            )));
        }
        if self.dataset.is_none() && self.n_scenes == 0 {
            return Err(ConfigError::Invalid("n_scenes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ToyModel, ConfigError> {
        self.validate()?;
        ToyModel::new(self.model.clone(), self.injectors()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
