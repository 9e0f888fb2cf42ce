use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mel::{logmel_channel, N_MELS};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

// Fixed input standardisation of log-mel energies before the first map.
const LOGMEL_CENTER: f64 = -4.0;
const LOGMEL_SPREAD: f64 = 6.0;

/// Frozen random feature extractor standing in for a pretrained speech
/// encoder: log-mel, then `n_layers` stacked `tanh(x·W + b)` maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySfmConfig {
    pub seed: u64,
    pub out_dim: usize,
    pub n_layers: usize,
    pub n_mels: usize,
}

impl Default for ToySfmConfig {
    fn default() -> Self {
        ToySfmConfig {
            seed: 0x5f3,
            out_dim: 128,
            n_layers: 3,
            n_mels: N_MELS,
        }
    }
}

pub struct ToySfm {
    cfg: ToySfmConfig,
    // (weights [fan_in × out_dim], bias [out_dim]) per layer.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ToySfm {
    pub fn new(cfg: ToySfmConfig) -> Result<Self> {
        if cfg.out_dim == 0 || cfg.n_layers == 0 || cfg.n_mels == 0 {
            return Err(Error::config(format!(
                "toy extractor needs positive out_dim, n_layers and n_mels, got {}/{}/{}",
                cfg.out_dim, cfg.n_layers, cfg.n_mels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bias = Normal::new(0.0, 0.1).unwrap();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let fan_in = if l == 0 { cfg.n_mels } else { cfg.out_dim };
                let wd = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
                let w = (0..fan_in * cfg.out_dim).map(|_| wd.sample(&mut rng)).collect();
                let b = (0..cfg.out_dim).map(|_| bias.sample(&mut rng)).collect();
                (w, b)
            })
            .collect();
        Ok(ToySfm { cfg, layers })
    }

    pub fn config(&self) -> &ToySfmConfig {
        &self.cfg
    }

    /// All layers of one channel sampled at 16 kHz:
    /// `[n_layers × frames × out_dim]`.
    pub fn extract_channel(&self, x: &[f64]) -> Result<Tensor<f32>> {
        let mel = logmel_channel(x, self.cfg.n_mels)?;
        let frames = mel.rows();
        let d = self.cfg.out_dim;
        let mut h: Vec<f64> = mel
            .data()
            .iter()
            .map(|v| (v - LOGMEL_CENTER) / LOGMEL_SPREAD)
            .collect();
        let mut fan_in = self.cfg.n_mels;
        let mut out = Vec::with_capacity(self.cfg.n_layers * frames * d);
        for (w, b) in &self.layers {
            let mut next: Vec<f64> = (0..frames).flat_map(|_| b.iter().copied()).collect();
            f64::gemm(false, false, frames, fan_in, d, 1.0, &h, w, 1.0, &mut next);
            next.iter_mut().for_each(|v| *v = v.tanh());
            out.extend(next.iter().map(|&v| v as f32));
            h = next;
            fan_in = d;
        }
        Tensor::new([self.cfg.n_layers, frames, d], out)
    }

    /// Mono 16 kHz waveform to `[n_layers × frames × out_dim]`.
    pub fn extract(&self, w: &Waveform) -> Result<Tensor<f32>> {
        w.require_rate(SAMPLE_RATE)?;
        if w.n_channels() != 1 {
            return Err(Error::contract("toy extractor expects a mono waveform"));
        }
        self.extract_channel(w.channel(0))
    }
}

/// One-shot form of [`ToySfm::extract`].
pub fn toy_sfm_extract(w: &Waveform, cfg: &ToySfmConfig) -> Result<Tensor<f32>> {
    ToySfm::new(cfg.clone())?.extract(w)
}
