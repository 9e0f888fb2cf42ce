//! The run configuration document (TOML) and flag overrides.

use std::path::{Path, PathBuf};

use egip_core::data::SynthConfig;
use egip_core::model::ModelConfig;
use egip_core::signal::{EnhancerSpec, ToySfmConfig};
use egip_core::train::TrainConfig;
use egip_core::{Error, Result};
use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize};

pub const OUT_DIR_ENV: &str = "EGIP_OUT_DIR";
pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_listeners: usize,
    pub clips_per_listener: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Listeners moved to the test manifest. Empty means the last three.
    pub holdout_listeners: Vec<String>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            n_listeners: c.n_listeners,
            clips_per_listener: c.clips_per_listener,
            seed: c.seed,
            duration_s: c.duration_s,
            snr_min_db: c.snr_min_db,
            snr_max_db: c.snr_max_db,
            holdout_listeners: Vec::new(),
        }
    }
}

impl SynthSection {
    pub fn corpus(&self) -> SynthConfig {
        SynthConfig {
            n_listeners: self.n_listeners,
            clips_per_listener: self.clips_per_listener,
            seed: self.seed,
            duration_s: self.duration_s,
            snr_min_db: self.snr_min_db,
            snr_max_db: self.snr_max_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub per_listener: usize,
    pub silence_s: f64,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            per_listener: 540,
            silence_s: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    #[serde(deserialize_with = "desk_model")]
    pub model: ModelConfig,
    #[serde(deserialize_with = "desk_train")]
    pub train: TrainConfig,
    pub frontend: ToySfmConfig,
    /// Enhancers available to `train` and `layer-sweep`. Built-in names
    /// (`identity`, `oracle_clean`, `spectral_subtraction`) need no entry.
    pub enhancers: Vec<EnhancerSpec>,
    pub synth: SynthSection,
    pub augment: AugmentSection,
    /// Written into effective configs for the record; ignored on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invocation {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: None,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            frontend: ToySfmConfig::default(),
            enhancers: vec![EnhancerSpec::identity()],
            synth: SynthSection::default(),
            augment: AugmentSection::default(),
            invocation: None,
        }
    }
}

/// Read a partial table and lay it over `base`, so absent keys keep the
/// desk presets instead of the struct's own defaults.
fn overlay<'de, T, D>(base: T, d: D) -> std::result::Result<T, D::Error>
where
    T: Serialize + DeserializeOwned,
    D: Deserializer<'de>,
{
    let patch = toml::Table::deserialize(d)?;
    let mut full = toml::Table::try_from(base).map_err(D::Error::custom)?;
    full.extend(patch);
    toml::Value::Table(full).try_into().map_err(D::Error::custom)
}

fn desk_model<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    overlay(ModelConfig::desk(), d)
}

fn desk_train<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    overlay(TrainConfig::desk(), d)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for e in &self.enhancers {
            e.validate()?;
        }
        if self.frontend.out_dim != self.model.sfm_feature_dim {
            log::warn!(
                "frontend out_dim {} differs from model sfm_feature_dim {}; only feature files of width {} will work",
                self.frontend.out_dim,
                self.model.sfm_feature_dim,
                self.model.sfm_feature_dim
            );
        }
        if !(self.augment.silence_s >= 0.0) {
            return Err(Error::config("augment.silence_s must be non-negative"));
        }
        Ok(())
    }

    /// Enhancer by name: a configured entry first, then a built-in.
    pub fn enhancer(&self, name: &str) -> Result<EnhancerSpec> {
        if let Some(e) = self.enhancers.iter().find(|e| e.name == name) {
            return Ok(e.clone());
        }
        match name {
            "identity" => Ok(EnhancerSpec::identity()),
            "oracle_clean" => Ok(EnhancerSpec::oracle_clean()),
            "spectral_subtraction" => Ok(EnhancerSpec::spectral_subtraction()),
            _ => Err(Error::config(format!("unknown enhancer {name}"))),
        }
    }

    /// Enhancers named on the command line, or all configured ones.
    pub fn pick_enhancers(&self, names: &[String]) -> Result<Vec<EnhancerSpec>> {
        if names.is_empty() {
            if self.enhancers.is_empty() {
                return Err(Error::config("no enhancers configured"));
            }
            return Ok(self.enhancers.clone());
        }
        let mut out: Vec<EnhancerSpec> = Vec::new();
        for n in names {
            if out.iter().any(|e| &e.name == n) {
                return Err(Error::config(format!("enhancer {n} given twice")));
            }
            out.push(self.enhancer(n)?);
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }
}

/// Output directory: flag, then environment, then config, then `fallback`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}
