//! Waveforms, spectral analysis, the toy feature extractor, enhancers and the
//! SIFB feature-file format.

mod enhance;
mod mel;
mod resample;
mod sfm;
mod sifb;
mod stft;
mod wav;

pub use enhance::{enhance, EnhanceInput, EnhancerKind, EnhancerSpec, SPECTRAL_FLOOR_BETA};
pub use mel::{logmel_extract, mel_filterbank, hz_to_mel, mel_to_hz, LOG_FLOOR, N_MELS};
pub use resample::resample;
pub use sfm::{toy_sfm_extract, ToySfm, ToySfmConfig};
pub use sifb::{
    read_feature_file, read_feature_header, write_feature_file, FeatureHeader, SIFB_DTYPE_F32,
    SIFB_MAGIC, SIFB_VERSION,
};
pub use stft::{istft, stft, Spectrogram, HOP, N_BINS, WIN};
pub use wav::{load_wav_16k, read_wav, write_wav};

use crate::error::{Error, Result};

/// Canonical sample rate of every model input.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono or stereo audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if !(1..=2).contains(&channels.len()) {
            return Err(Error::contract(format!(
                "waveforms have 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(Error::contract("stereo channels differ in length"));
        }
        Ok(Waveform {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Waveform::new(vec![samples], sample_rate)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Waveform::new(vec![left, right], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Channel `ear` of a binaural signal; mono signals serve both ears.
    pub fn ear(&self, ear: usize) -> &[f64] {
        &self.channels[ear.min(self.channels.len() - 1)]
    }

    /// Apply a length-preserving transform to each channel independently.
    pub fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Waveform> {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let out = f(c)?;
                if out.len() != c.len() {
                    return Err(Error::contract(format!(
                        "channel transform changed length {} -> {}",
                        c.len(),
                        out.len()
                    )));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Waveform::new(channels, self.sample_rate)
    }

    pub fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::contract(format!(
                "expected {rate} Hz audio, got {} Hz; resample offline first",
                self.sample_rate
            )));
        }
        Ok(())
    }

    /// Join waveforms end to end with `gap` samples of silence between
    /// neighbours. Channel counts are broadcast (mono + stereo → stereo).
    pub fn concat(parts: &[Waveform], gap: usize) -> Result<Waveform> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("nothing to concatenate"))?;
        let rate = first.sample_rate;
        if parts.iter().any(|p| p.sample_rate != rate) {
            return Err(Error::contract("cannot concatenate different sample rates"));
        }
        let n_ch = parts.iter().map(Waveform::n_channels).max().unwrap_or(1);
        let total = parts.iter().map(Waveform::len).sum::<usize>() + gap * (parts.len() - 1);
        let channels = (0..n_ch)
            .map(|c| {
                let mut out = Vec::with_capacity(total);
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        out.resize(out.len() + gap, 0.0);
                    }
                    out.extend_from_slice(p.ear(c));
                }
                out
            })
            .collect();
        Waveform::new(channels, rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stereo_channels_must_match() {
        assert!(Waveform::stereo(vec![0.0; 3], vec![0.0; 4], SAMPLE_RATE).is_err());
        assert!(Waveform::mono(vec![], 0).is_err());
        assert!(Waveform::new(vec![vec![]; 3], SAMPLE_RATE).is_err());
    }

    #[test]
    fn concat_inserts_gap() {
        let a = Waveform::mono(vec![1.0; 10], SAMPLE_RATE).unwrap();
        let b = Waveform::stereo(vec![2.0; 5], vec![3.0; 5], SAMPLE_RATE).unwrap();
        let c = Waveform::concat(&[a, b], 8000).unwrap();
        assert_eq!(c.len(), 10 + 8000 + 5);
        assert_eq!(c.n_channels(), 2);
        assert_eq!(c.channel(1)[9], 1.0);
        assert_eq!(c.channel(1)[10 + 8000], 3.0);
        assert!(c.channel(0)[10..8010].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_rate_names_the_fix() {
        let w = Waveform::mono(vec![0.0; 4], 44_100).unwrap();
        let e = w.require_rate(SAMPLE_RATE).unwrap_err();
        assert!(e.to_string().contains("resample"));
    }
}
