use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dsp::StftParams;
use crate::neural::{NeuralConfig, TrainConfig};
use crate::scenesim::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(HarnessError::Config(format!("unknown profile {other:?}, expected desk or paper"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Neural,
    Fastmnmf,
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neural" => Ok(Self::Neural),
            "fastmnmf" => Ok(Self::Fastmnmf),
            other => Err(HarnessError::Config(format!("unknown method {other:?}, expected neural or fastmnmf"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Training scenes.
    pub train: usize,
    /// Held-out test scenes.
    pub test: usize,
}

/// Network shape; bins and channels follow from `[stft]` and `[scene]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub sources: usize,
    pub latent_dim: usize,
    pub iss_blocks: usize,
    pub width: usize,
    pub decoder_width: usize,
    pub layers: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastMnmfSection {
    pub sources: usize,
    pub bases: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparateSection {
    pub method: Method,
    /// Zero-based reference microphone.
    pub reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub repeats: usize,
    pub scenes: usize,
    pub fastmnmf_iterations: usize,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Master seed; copied into `scene.seed` and `train.seed` unless those
    /// are set explicitly in the file.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub scene: SceneConfig,
    pub stft: StftParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fastmnmf: FastMnmfSection,
    pub separate: SeparateSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let stft = StftParams { window: 512, hop: 128 };
        let (scene, model, dataset) = match profile {
            Profile::Desk => (SceneConfig::desk(), NeuralConfig::desk(0, 0), DatasetSection { train: 200, test: 20 }),
            Profile::Paper => (SceneConfig::paper(), NeuralConfig::paper(0, 0), DatasetSection { train: 20000, test: 3000 }),
        };
        let mut train = TrainConfig::desk();
        if profile == Profile::Paper {
            train.epochs = 200;
            train.batch_size = 128;
            train.clip_frames = 500;
        }
        Self {
            profile,
            seed: 0,
            dataset,
            scene,
            stft,
            model: ModelSection {
                sources: model.sources,
                latent_dim: model.latent_dim,
                iss_blocks: model.iss_blocks,
                width: model.width,
                decoder_width: model.decoder_width,
                layers: model.layers,
                kernel: model.kernel,
            },
            train,
            fastmnmf: FastMnmfSection {
                sources: model.sources,
                bases: if profile == Profile::Desk { 4 } else { 16 },
                iterations: if profile == Profile::Desk { 100 } else { 200 },
            },
            separate: SeparateSection { method: Method::Neural, reference: 0 },
            bench: BenchSection { repeats: 5, scenes: 1, fastmnmf_iterations: 100 },
        }
    }

    /// Profile defaults overridden by the TOML text `overrides` (any subset
    /// of keys), then by `seed`. Unknown keys are rejected.
    pub fn resolve(profile: Profile, overrides: Option<&str>, seed: Option<u64>) -> Result<Self, HarnessError> {
        let cfg_err = |e: &dyn fmt::Display| HarnessError::Config(e.to_string());
        let mut base = toml::Value::try_from(Self::profile(profile)).map_err(|e| cfg_err(&e))?;
        let file: toml::Table = match overrides {
            Some(text) => toml::from_str(text).map_err(|e| cfg_err(&e))?,
            None => toml::Table::new(),
        };
        if let Some(p) = file.get("profile") {
            if p.as_str() != Some(&profile.to_string()) {
                return Err(HarnessError::Config(format!("config file is for profile {p}, running {profile}")));
            }
        }
        let explicit = |section: &str| file.get(section).and_then(|s| s.get("seed")).is_some();
        let (scene_seed, train_seed) = (explicit("scene"), explicit("train"));
        merge(&mut base, toml::Value::Table(file));
        let mut cfg: Self = base.try_into().map_err(|e: toml::de::Error| cfg_err(&e))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if seed.is_some() || !scene_seed {
            cfg.scene.seed = cfg.seed;
        }
        if seed.is_some() || !train_seed {
            cfg.train.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |e: &dyn fmt::Display| HarnessError::Config(e.to_string());
        self.scene.validate().map_err(|e| err(&e))?;
        StftParams::new(self.stft.window, self.stft.hop).map_err(|e| err(&e))?;
        self.neural().validate().map_err(|e| err(&e))?;
        self.train.validate().map_err(|e| err(&e))?;
        if self.scene.samples() < self.stft.window {
            return Err(HarnessError::Config("scene duration is shorter than one STFT window".into()));
        }
        if self.separate.reference >= self.scene.mics {
            return Err(HarnessError::Config(format!(
                "reference channel {} out of range for {} microphones",
                self.separate.reference, self.scene.mics
            )));
        }
        if self.fastmnmf.sources == 0 || self.fastmnmf.bases == 0 {
            return Err(HarnessError::Config("fastmnmf sources and bases must be positive".into()));
        }
        if self.bench.repeats == 0 {
            return Err(HarnessError::Config("bench repeats must be positive".into()));
        }
        Ok(())
    }

    pub fn neural(&self) -> NeuralConfig {
        let m = &self.model;
        NeuralConfig {
            bins: self.stft.window / 2 + 1,
            channels: self.scene.mics,
            sources: m.sources,
            latent_dim: m.latent_dim,
            iss_blocks: m.iss_blocks,
            width: m.width,
            decoder_width: m.decoder_width,
            layers: m.layers,
            kernel: m.kernel,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursive table merge; values in `over` win.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
