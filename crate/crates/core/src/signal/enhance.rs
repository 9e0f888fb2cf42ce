use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stft::{istft, stft, N_BINS};
use super::wav::load_wav_16k;
use super::Waveform;
use crate::error::{Error, Result};

/// Default spectral floor as a fraction of the noise estimate.
pub const SPECTRAL_FLOOR_BETA: f64 = 0.02;

fn default_beta() -> f64 {
    SPECTRAL_FLOOR_BETA
}

fn default_noise_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnhancerKind {
    Identity,
    /// Intrusive oracle: the clip's clean reference.
    OracleClean,
    SpectralSubtraction {
        #[serde(default = "default_beta")]
        beta: f64,
        /// Share of lowest-energy frames averaged into the noise estimate.
        #[serde(default = "default_noise_fraction")]
        noise_fraction: f64,
    },
    /// Pre-enhanced audio on disk. Clips may name their own file; otherwise
    /// `{clip_id}` in the template is substituted.
    FileBacked {
        #[serde(default)]
        path_template: Option<String>,
    },
}

/// A named enhancer; the name keys per-enhancer manifest paths and
/// ensemble members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: EnhancerKind,
}

impl EnhancerSpec {
    pub fn identity() -> Self {
        EnhancerSpec {
            name: "identity".into(),
            kind: EnhancerKind::Identity,
        }
    }

    pub fn oracle_clean() -> Self {
        EnhancerSpec {
            name: "oracle_clean".into(),
            kind: EnhancerKind::OracleClean,
        }
    }

    pub fn spectral_subtraction() -> Self {
        EnhancerSpec {
            name: "spectral_subtraction".into(),
            kind: EnhancerKind::SpectralSubtraction {
                beta: SPECTRAL_FLOOR_BETA,
                noise_fraction: default_noise_fraction(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("enhancer name is empty"));
        }
        if let EnhancerKind::SpectralSubtraction {
            beta,
            noise_fraction,
        } = self.kind
        {
            if !(beta >= 0.0) || !(noise_fraction > 0.0 && noise_fraction <= 1.0) {
                return Err(Error::config(format!(
                    "enhancer {}: need beta >= 0 and noise_fraction in (0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// File a file-backed enhancer reads for `clip_id`, if any.
    pub fn resolve_path(&self, clip_id: &str, explicit: Option<&Path>) -> Option<PathBuf> {
        match &self.kind {
            EnhancerKind::FileBacked { path_template } => explicit
                .map(Path::to_path_buf)
                .or_else(|| path_template.as_ref().map(|t| PathBuf::from(t.replace("{clip_id}", clip_id)))),
            _ => None,
        }
    }
}

/// Per-clip side information some enhancers need.
#[derive(Clone, Copy, Debug, Default)]
pub struct EnhanceInput<'a> {
    pub clip_id: &'a str,
    pub clean: Option<&'a Waveform>,
    pub enhanced_path: Option<&'a Path>,
}

fn spectral_subtract(x: &[f64], beta: f64, noise_fraction: f64) -> Result<Vec<f64>> {
    let mut spec = stft(x)?;
    let frames = spec.frames;
    let mag = spec.magnitude();
    let mut order: Vec<(f64, usize)> = (0..frames)
        .map(|t| (mag[t * N_BINS..(t + 1) * N_BINS].iter().map(|m| m * m).sum(), t))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let quiet = ((frames as f64 * noise_fraction).ceil() as usize).clamp(1, frames);
    let mut noise = vec![0.0; N_BINS];
    for &(_, t) in &order[..quiet] {
        for (n, m) in noise.iter_mut().zip(&mag[t * N_BINS..(t + 1) * N_BINS]) {
            *n += m / quiet as f64;
        }
    }
    for t in 0..frames {
        for (k, c) in spec.frame_mut(t).iter_mut().enumerate() {
            let m = c.norm();
            let target = (m - noise[k]).max(beta * noise[k]);
            if m > 0.0 {
                *c *= target / m;
            }
        }
    }
    istft(&spec, x.len())
}

/// Run one enhancer, channel by channel for stereo input. Always
/// length-preserving.
pub fn enhance(spec: &EnhancerSpec, w: &Waveform, input: &EnhanceInput<'_>) -> Result<Waveform> {
    match &spec.kind {
        EnhancerKind::Identity => Ok(w.clone()),
        EnhancerKind::OracleClean => {
            let clean = input
                .clean
                .ok_or_else(|| Error::MissingReference(input.clip_id.to_string()))?;
            if clean.len() != w.len() || clean.sample_rate() != w.sample_rate() {
                return Err(Error::contract(format!(
                    "clip {}: clean reference has {} samples at {} Hz, signal {} at {} Hz",
                    input.clip_id,
                    clean.len(),
                    clean.sample_rate(),
                    w.len(),
                    w.sample_rate()
                )));
            }
            let channels = (0..w.n_channels()).map(|c| clean.ear(c).to_vec()).collect();
            Waveform::new(channels, w.sample_rate())
        }
        EnhancerKind::SpectralSubtraction {
            beta,
            noise_fraction,
        } => w.map_channels(|x| spectral_subtract(x, *beta, *noise_fraction)),
        EnhancerKind::FileBacked { .. } => {
            let path = spec.resolve_path(input.clip_id, input.enhanced_path).ok_or_else(|| {
                Error::config(format!(
                    "enhancer {} has no file for clip {}",
                    spec.name, input.clip_id
                ))
            })?;
            let e = load_wav_16k(&path)?;
            if e.len() != w.len() {
                return Err(Error::contract(format!(
                    "{}: enhanced file has {} samples, signal {}",
                    path.display(),
                    e.len(),
                    w.len()
                )));
            }
            let channels = (0..w.n_channels()).map(|c| e.ear(c).to_vec()).collect();
            Waveform::new(channels, w.sample_rate())
        }
    }
}
